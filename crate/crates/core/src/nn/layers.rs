//! Fixed layer menu. Layers own their parameters, cache what backward
//! needs during `forward_train`, and accumulate gradients on `backward`.
//! `forward_eval` is pure and usable from shared references.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use super::{shape_err, NnError};

/// Trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Weight decay applies to conv/linear weights, not biases or norm
    /// parameters.
    pub apply_weight_decay: bool,
}

impl ParamTensor {
    pub fn new(value: Tensor, apply_weight_decay: bool) -> ParamTensor {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        ParamTensor {
            value,
            grad,
            momentum,
            apply_weight_decay,
        }
    }
}

pub trait Layer: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Forward pass that caches whatever `backward` will need.
    fn forward_train(&mut self, x: Tensor) -> Tensor;
    /// Pure forward pass (running statistics for batch norm).
    fn forward_eval(&self, x: Tensor) -> Tensor;
    /// Propagate the loss gradient, accumulating parameter gradients.
    fn backward(&mut self, grad: Tensor) -> Tensor;
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        let _ = (prefix, f);
    }
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let _ = (prefix, f);
    }
}

fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::from_vec(shape, data)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unpack one image into a `[c*k*k, oh*ow]` patch matrix, zero padding
/// out-of-range taps.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), channels * k * k * oh * ow);
    let mut row = 0usize;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let mut di = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[di..di + ow].iter_mut().for_each(|v| *v = 0.0);
                        di += ow;
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[di] = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        di += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let mut row = 0usize;
    for c in 0..channels {
        let plane_off = c * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let mut si = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        si += ow;
                        continue;
                    }
                    let base = plane_off + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[si];
                        }
                        si += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation.
pub struct Conv2d {
    pub weight: ParamTensor, // [out_c, in_c, k, k]
    pub bias: ParamTensor,   // [out_c]
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let weight = kaiming_normal(&[out_c, in_c, k, k], in_c * k * k, rng);
        Conv2d {
            weight: ParamTensor::new(weight, true),
            bias: ParamTensor::new(Tensor::zeros(&[out_c]), false),
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn with_params(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Conv2d {
        assert_eq!(weight.rank(), 4, "conv weight must be [oc, ic, k, k]");
        assert_eq!(bias.len(), weight.dim(0));
        Conv2d {
            weight: ParamTensor::new(weight, true),
            bias: ParamTensor::new(bias, false),
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.dim(2)
    }

    fn forward_impl(&self, x: &Tensor) -> Tensor {
        let (n, ic, h, w) = nchw(x);
        let oc = self.weight.value.dim(0);
        let k = self.kernel_size();
        assert_eq!(
            ic,
            self.weight.value.dim(1),
            "conv2d: input has {ic} channels, kernel expects {}",
            self.weight.value.dim(1)
        );
        assert!(h + 2 * self.pad >= k && w + 2 * self.pad >= k, "conv2d: input too small");
        let oh = conv_out_dim(h, k, self.stride, self.pad);
        let ow = conv_out_dim(w, k, self.stride, self.pad);
        let patch = ic * k * k;
        let mut cols = vec![0.0; patch * oh * ow];
        let mut y = Tensor::zeros(&[n, oc, oh, ow]);
        let wf = self.weight.value.data();
        let bias = self.bias.value.data();
        for img in 0..n {
            im2col(
                &x.data()[img * ic * h * w..(img + 1) * ic * h * w],
                ic,
                h,
                w,
                k,
                self.stride,
                self.pad,
                oh,
                ow,
                &mut cols,
            );
            let y_img = &mut y.data_mut()[img * oc * oh * ow..(img + 1) * oc * oh * ow];
            for (o, chunk) in y_img.chunks_exact_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
            matmul_acc(y_img, wf, &cols, oc, patch, oh * ow);
        }
        y
    }

    /// Weight tensor view used by parameter accounting tests.
    pub fn weight_shape(&self) -> &[usize] {
        self.weight.value.shape()
    }
}

fn nchw(x: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(x.rank(), 4, "expected NCHW tensor, got shape {:?}", x.shape());
    (x.dim(0), x.dim(1), x.dim(2), x.dim(3))
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let y = self.forward_impl(&x);
        self.cache_x = Some(x);
        y
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        self.forward_impl(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache_x.take().expect("conv2d backward without forward");
        let (n, ic, h, w) = nchw(&x);
        let oc = self.weight.value.dim(0);
        let k = self.kernel_size();
        let oh = conv_out_dim(h, k, self.stride, self.pad);
        let ow = conv_out_dim(w, k, self.stride, self.pad);
        assert_eq!(grad.shape(), &[n, oc, oh, ow], "conv2d backward shape mismatch");
        let patch = ic * k * k;
        let mut cols = vec![0.0; patch * oh * ow];
        let mut dcols = vec![0.0; patch * oh * ow];
        let mut dx = Tensor::zeros(&[n, ic, h, w]);
        let dwf = self.weight.grad.data_mut();
        let dbf = self.bias.grad.data_mut();
        let wf = self.weight.value.data();
        for img in 0..n {
            let x_img = &x.data()[img * ic * h * w..(img + 1) * ic * h * w];
            let g_img = &grad.data()[img * oc * oh * ow..(img + 1) * oc * oh * ow];
            im2col(x_img, ic, h, w, k, self.stride, self.pad, oh, ow, &mut cols);
            // dW += dY · colsᵀ
            matmul_nt_acc(dwf, g_img, &cols, oc, oh * ow, patch);
            for (o, chunk) in g_img.chunks_exact(oh * ow).enumerate() {
                dbf[o] += chunk.iter().sum::<f64>();
            }
            // dcols = Wᵀ · dY
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_tn_acc(&mut dcols, wf, g_img, patch, oc, oh * ow);
            col2im_acc(
                &dcols,
                ic,
                h,
                w,
                k,
                self.stride,
                self.pad,
                oh,
                ow,
                &mut dx.data_mut()[img * ic * h * w..(img + 1) * ic * h * w],
            );
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

/// Validated standalone convolution, for direct use outside a network.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    if x.rank() != 4 {
        return Err(shape_err("conv2d", format!("input must be NCHW, got {:?}", x.shape())));
    }
    if weight.rank() != 4 || bias.rank() != 1 || bias.len() != weight.dim(0) {
        return Err(shape_err(
            "conv2d",
            format!("bad kernel shapes {:?} / {:?}", weight.shape(), bias.shape()),
        ));
    }
    if x.dim(1) != weight.dim(1) {
        return Err(shape_err(
            "conv2d",
            format!("input channels {} != kernel channels {}", x.dim(1), weight.dim(1)),
        ));
    }
    let k = weight.dim(2);
    if x.dim(2) + 2 * pad < k || x.dim(3) + 2 * pad < k {
        return Err(shape_err("conv2d", "input smaller than kernel".to_string()));
    }
    let conv = Conv2d::with_params(weight.clone(), bias.clone(), stride, pad);
    Ok(conv.forward_eval(x.clone()))
}

pub struct Relu {
    cache_x: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cache_x: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.cache_x = Some(x);
        y
    }

    fn forward_eval(&self, mut x: Tensor) -> Tensor {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let x = self.cache_x.take().expect("relu backward without forward");
        for (g, &xi) in grad.data_mut().iter_mut().zip(x.data().iter()) {
            if xi <= 0.0 {
                *g = 0.0;
            }
        }
        grad
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<usize>)>, // argmax flat indices, input shape
}

impl MaxPool2x2 {
    pub fn new() -> MaxPool2x2 {
        MaxPool2x2 { cache: None }
    }

    fn pool(x: &Tensor, argmax: Option<&mut Vec<usize>>) -> Tensor {
        let (n, c, h, w) = nchw(x);
        assert!(h >= 2 && w >= 2, "maxpool2x2: input must be at least 2x2");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut idx = argmax;
        let xd = x.data();
        let yd = y.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            let obase = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + (2 * oy) * w + 2 * ox;
                    let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = candidates[0];
                    for &cand in &candidates[1..] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    yd[obase + oy * ow + ox] = xd[best];
                    if let Some(v) = idx.as_deref_mut() {
                        v.push(best);
                    }
                }
            }
        }
        y
    }
}

impl Default for MaxPool2x2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for MaxPool2x2 {
    fn kind(&self) -> &'static str {
        "maxpool2x2"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let mut argmax = Vec::with_capacity(x.len() / 4);
        let y = Self::pool(&x, Some(&mut argmax));
        self.cache = Some((argmax, x.shape().to_vec()));
        y
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        Self::pool(&x, None)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let (argmax, in_shape) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Tensor::zeros(&in_shape);
        let dxd = dx.data_mut();
        for (&i, &g) in argmax.iter().zip(grad.data().iter()) {
            dxd[i] += g;
        }
        dx
    }
}

/// Spatial mean per channel: [n, c, h, w] -> [n, c].
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> GlobalAvgPool {
        GlobalAvgPool { in_shape: None }
    }

    fn pool(x: &Tensor) -> Tensor {
        let (n, c, h, w) = nchw(x);
        let inv = 1.0 / (h * w) as f64;
        let mut y = Tensor::zeros(&[n, c]);
        for (plane, out) in x.data().chunks_exact(h * w).zip(y.data_mut().iter_mut()) {
            *out = plane.iter().sum::<f64>() * inv;
        }
        y
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let y = Self::pool(&x);
        self.in_shape = Some(x.shape().to_vec());
        y
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        Self::pool(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let in_shape = self.in_shape.take().expect("gap backward without forward");
        let (h, w) = (in_shape[2], in_shape[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut dx = Tensor::zeros(&in_shape);
        for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(grad.data().iter()) {
            plane.iter_mut().for_each(|v| *v = g * inv);
        }
        dx
    }
}

/// [n, c, h, w] -> [n, c*h*w].
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Flatten {
        Flatten { in_shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.in_shape = Some(x.shape().to_vec());
        let n = x.dim(0);
        let rest = x.len() / n;
        x.reshape(&[n, rest])
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        let n = x.dim(0);
        let rest = x.len() / n;
        x.reshape(&[n, rest])
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let in_shape = self.in_shape.take().expect("flatten backward without forward");
        grad.reshape(&in_shape)
    }
}

/// Fully connected layer, weight stored [out, in].
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    cache_x: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let weight = kaiming_normal(&[out_dim, in_dim], in_dim, rng);
        Linear {
            weight: ParamTensor::new(weight, true),
            bias: ParamTensor::new(Tensor::zeros(&[out_dim]), false),
            cache_x: None,
        }
    }

    pub fn with_params(weight: Tensor, bias: Tensor) -> Linear {
        assert_eq!(weight.rank(), 2);
        assert_eq!(bias.len(), weight.dim(0));
        Linear {
            weight: ParamTensor::new(weight, true),
            bias: ParamTensor::new(bias, false),
            cache_x: None,
        }
    }

    fn forward_impl(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rank(), 2, "linear expects [n, features]");
        let (n, in_dim) = (x.dim(0), x.dim(1));
        let out_dim = self.weight.value.dim(0);
        assert_eq!(in_dim, self.weight.value.dim(1), "linear input width mismatch");
        let mut y = Tensor::zeros(&[n, out_dim]);
        for row in y.data_mut().chunks_exact_mut(out_dim) {
            row.copy_from_slice(self.bias.value.data());
        }
        matmul_nt_acc(y.data_mut(), x.data(), self.weight.value.data(), n, in_dim, out_dim);
        y
    }
}

impl Layer for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let y = self.forward_impl(&x);
        self.cache_x = Some(x);
        y
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        self.forward_impl(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache_x.take().expect("linear backward without forward");
        let (n, in_dim) = (x.dim(0), x.dim(1));
        let out_dim = self.weight.value.dim(0);
        assert_eq!(grad.shape(), &[n, out_dim]);
        // dW += dYᵀ · X
        matmul_tn_acc(
            self.weight.grad.data_mut(),
            grad.data(),
            x.data(),
            out_dim,
            n,
            in_dim,
        );
        let db = self.bias.grad.data_mut();
        for row in grad.data().chunks_exact(out_dim) {
            for (d, &g) in db.iter_mut().zip(row.iter()) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, in_dim]);
        matmul_acc(dx.data_mut(), grad.data(), self.weight.value.data(), n, out_dim, in_dim);
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization over (n, h, w), running statistics with
/// momentum 0.1.
pub struct BatchNorm2d {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: ParamTensor::new(Tensor::filled(&[channels], 1.0), false),
            beta: ParamTensor::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn kind(&self) -> &'static str {
        "batchnorm2d"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let (n, c, h, w) = nchw(&x);
        assert_eq!(c, self.gamma.value.len(), "batchnorm channel mismatch");
        let cnt = (n * h * w) as f64;
        assert!(cnt >= 1.0, "batchnorm on empty batch");
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let mut x_hat = Tensor::zeros(&[n, c, h, w]);
        let mut inv_std = vec![0.0; c];
        let plane = h * w;
        for ch in 0..c {
            let mut mean = 0.0;
            for img in 0..n {
                let off = (img * c + ch) * plane;
                mean += x.data()[off..off + plane].iter().sum::<f64>();
            }
            mean /= cnt;
            let mut var = 0.0;
            for img in 0..n {
                let off = (img * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= cnt;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for img in 0..n {
                let off = (img * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean) * istd;
                    x_hat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + b;
                }
            }
            let unbiased = if cnt > 1.0 { var * cnt / (cnt - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.data_mut()[ch] = (1.0 - m) * self.running_mean.data()[ch] + m * mean;
            self.running_var.data_mut()[ch] = (1.0 - m) * self.running_var.data()[ch] + m * unbiased;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    fn forward_eval(&self, mut x: Tensor) -> Tensor {
        let (n, c, h, w) = nchw(&x);
        assert_eq!(c, self.gamma.value.len(), "batchnorm channel mismatch");
        let plane = h * w;
        for ch in 0..c {
            let mean = self.running_mean.data()[ch];
            let istd = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for img in 0..n {
                let off = (img * c + ch) * plane;
                for v in &mut x.data_mut()[off..off + plane] {
                    *v = g * (*v - mean) * istd + b;
                }
            }
        }
        x
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let BnCache { x_hat, inv_std } = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = nchw(&grad);
        let cnt = (n * h * w) as f64;
        let plane = h * w;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for img in 0..n {
                let off = (img * c + ch) * plane;
                for i in off..off + plane {
                    let dy = grad.data()[i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * x_hat.data()[i];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_dy;
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            let istd = inv_std[ch];
            for img in 0..n {
                let off = (img * c + ch) * plane;
                for i in off..off + plane {
                    let dy = grad.data()[i];
                    let xh = x_hat.data()[i];
                    dx.data_mut()[i] =
                        g * istd / cnt * (cnt * dy - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

/// Chain of layers. Backward checks each propagated gradient for NaN/Inf and
/// aborts naming the offending layer.
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Sequential {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Box<dyn Layer>) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }
}

impl Layer for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let mut t = x;
        for layer in self.layers.iter_mut() {
            t = layer.forward_train(t);
        }
        t
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        let mut t = x;
        for layer in self.layers.iter() {
            t = layer.forward_eval(t);
        }
        t
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut g = grad;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(g);
            assert!(
                g.all_finite(),
                "non-finite gradient leaving layer {i} ({})",
                layer.kind()
            );
        }
        g
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_buffers(&format!("{prefix}{i}."), f);
        }
    }
}

/// Basic residual block: conv-bn-relu-conv-bn plus identity (or projected)
/// shortcut, followed by ReLU.
pub struct ResidualBlock {
    main: Sequential,
    shortcut: Option<Sequential>,
    cache_pre: Option<Tensor>,
}

impl ResidualBlock {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> ResidualBlock {
        let main = Sequential::new(vec![
            Box::new(Conv2d::new(in_c, out_c, 3, stride, 1, rng)),
            Box::new(BatchNorm2d::new(out_c)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(out_c, out_c, 3, 1, 1, rng)),
            Box::new(BatchNorm2d::new(out_c)),
        ]);
        let shortcut = if stride != 1 || in_c != out_c {
            Some(Sequential::new(vec![
                Box::new(Conv2d::new(in_c, out_c, 1, stride, 0, rng)),
                Box::new(BatchNorm2d::new(out_c)),
            ]))
        } else {
            None
        };
        ResidualBlock {
            main,
            shortcut,
            cache_pre: None,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }
}

impl Layer for ResidualBlock {
    fn kind(&self) -> &'static str {
        "residual_block"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let mut pre = self.main.forward_train(x.clone());
        let skip = match self.shortcut.as_mut() {
            Some(sc) => sc.forward_train(x),
            None => x,
        };
        pre.add_assign(&skip);
        let mut y = pre.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.cache_pre = Some(pre);
        y
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        let mut pre = self.main.forward_eval(x.clone());
        let skip = match self.shortcut.as_ref() {
            Some(sc) => sc.forward_eval(x),
            None => x,
        };
        pre.add_assign(&skip);
        pre.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        pre
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let pre = self.cache_pre.take().expect("residual backward without forward");
        for (g, &p) in grad.data_mut().iter_mut().zip(pre.data().iter()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let mut dx = self.main.backward(grad.clone());
        let dskip = match self.shortcut.as_mut() {
            Some(sc) => sc.backward(grad),
            None => grad,
        };
        dx.add_assign(&dskip);
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.main.visit_params(&format!("{prefix}main."), f);
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_params(&format!("{prefix}shortcut."), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.main.visit_buffers(&format!("{prefix}main."), f);
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_buffers(&format!("{prefix}shortcut."), f);
        }
    }
}

/// Mean cross-entropy over the batch with log-sum-exp stabilization.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    if logits.rank() != 2 {
        return Err(shape_err("softmax_cross_entropy", format!("expected [n, classes], got {:?}", logits.shape())));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if n == 0 {
        return Err(shape_err("softmax_cross_entropy", "batch of size 0".to_string()));
    }
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for batch of {}", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(shape_err("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks_exact(k).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut se = 0.0;
        let prow = &mut probs.data_mut()[i * k..(i + 1) * k];
        for (p, &z) in prow.iter_mut().zip(row.iter()) {
            *p = (z - m).exp();
            se += *p;
        }
        prow.iter_mut().for_each(|p| *p /= se);
        loss += se.ln() + m - row[labels[i]];
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean batch loss with respect to the logits.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let inv = 1.0 / n as f64;
    let mut grad = probs.clone();
    for (i, row) in grad.data_mut().chunks_exact_mut(k).enumerate() {
        row.iter_mut().for_each(|v| *v *= inv);
        row[labels[i]] -= inv;
    }
    grad
}

/// Row argmax with ties broken by the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Zero every parameter gradient below a layer.
pub fn zero_grads(layer: &mut dyn Layer) {
    layer.visit_params("", &mut |_, p| p.grad.fill(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_cross_entropy, check_layer, random_input};
    use crate::util::derive_rng;

    /// Independent nested-loop convolution. Accumulates with `mul_add` in
    /// (channel, ky, kx) order, the documented summation contract, so the
    /// comparison against the im2col path is exact.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ic, h, wdt) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oc, k) = (w.dim(0), w.dim(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wdt + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[n, oc, oh, ow]);
        for img in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ic {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wdt as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((img * ic + c) * h + iy as usize) * wdt + ix as usize];
                                    let wv = w.data()[((o * ic + c) * k + ky) * k + kx];
                                    acc = wv.mul_add(xv, acc);
                                }
                            }
                        }
                        y.data_mut()[((img * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_sum_kernel_reduces_to_total() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 45.0);
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let x = random_input(&[2, 1, 4, 4], 1);
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_nested_loop_oracle_exactly() {
        let mut rng = derive_rng(0xc0, 0, 0);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = random_input(&[2, 3, 5, 5], 7 + stride as u64 + pad as u64);
            let w = kaiming_normal(&[4, 3, 3, 3], 27, &mut rng);
            let b = kaiming_normal(&[4], 4, &mut rng);
            let got = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got, want, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::zeros(&[3]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn relu_values() {
        let mut layer = Relu::new();
        let y = layer.forward_train(Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_2x2_takes_the_max() {
        let layer = MaxPool2x2::new();
        let y = layer.forward_eval(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut layer = MaxPool2x2::new();
        let _ = layer.forward_train(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let dx = layer.backward(Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]));
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let layer = GlobalAvgPool::new();
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let y = layer.forward_eval(x);
        assert_eq!(y.data(), &[2.5, 10.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
        for row in probs.data().chunks_exact(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_empty_and_bad_labels() {
        let logits = Tensor::zeros(&[0, 5]);
        assert!(softmax_cross_entropy(&logits, &[]).is_err());
        let logits = Tensor::zeros(&[1, 5]);
        assert!(softmax_cross_entropy(&logits, &[5]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn saturated_softmax_has_vanishing_gradient() {
        let logits = Tensor::from_vec(&[1, 3], vec![200.0, 0.0, 0.0]);
        let (_, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
        let grad = cross_entropy_grad(&probs, &[0]);
        for &g in grad.data() {
            assert!(g.abs() < 1e-12, "got {g}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss_gradient() {
        let mut rng = derive_rng(0x11, 0, 0);
        let x = random_input(&[2, 2, 4, 4], 3);
        let g = random_input(&[2, 3, 4, 4], 4);
        let mut layer = Conv2d::new(2, 3, 3, 1, 1, &mut rng);

        let _ = layer.forward_train(x.clone());
        let dx1 = layer.backward(g.clone());
        let mut grads1 = Vec::new();
        layer.visit_params("", &mut |_, p| grads1.push(p.grad.clone()));
        zero_grads(&mut layer);

        let mut g2 = g.clone();
        g2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let _ = layer.forward_train(x);
        let dx2 = layer.backward(g2);
        let mut grads2 = Vec::new();
        layer.visit_params("", &mut |_, p| grads2.push(p.grad.clone()));

        for (a, b) in dx1.data().iter().zip(dx2.data().iter()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
        for (t1, t2) in grads1.iter().zip(grads2.iter()) {
            for (a, b) in t1.data().iter().zip(t2.data().iter()) {
                assert!((2.0 * a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch_statistics() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let y = bn.forward_train(x);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps keeps it slightly below 1
        // Running stats moved toward the batch stats with momentum 0.1.
        assert!((bn.running_mean.data()[0] - 0.1 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean = Tensor::from_vec(&[1], vec![2.0]);
        bn.running_var = Tensor::from_vec(&[1], vec![4.0]);
        let y = bn.forward_eval(Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]));
        assert!((y.data()[0] - (4.0 - 2.0) / (4.0f64 + 1e-5).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn residual_block_with_zeroed_main_is_identity_on_nonnegative_input() {
        let mut rng = derive_rng(0x22, 0, 0);
        let mut block = ResidualBlock::new(3, 3, 1, &mut rng);
        block.main.visit_params("", &mut |_, p| p.value.fill(0.0));
        let mut x = random_input(&[1, 3, 4, 4], 5);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let y = block.forward_eval(x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn residual_block_with_zeroed_main_reduces_to_projected_shortcut() {
        let mut rng = derive_rng(0x23, 0, 0);
        let mut block = ResidualBlock::new(2, 4, 2, &mut rng);
        block.main.visit_params("", &mut |_, p| p.value.fill(0.0));
        let x = random_input(&[1, 2, 6, 6], 6);
        let got = block.forward_eval(x.clone());
        let mut want = block.shortcut.as_ref().unwrap().forward_eval(x);
        want.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        assert_eq!(got, want);
    }

    #[test]
    #[should_panic(expected = "non-finite gradient leaving layer 0 (conv2d)")]
    fn non_finite_gradients_abort_naming_the_layer() {
        let mut rng = derive_rng(0x66, 0, 0);
        let mut conv = Conv2d::new(1, 2, 3, 1, 1, &mut rng);
        conv.weight.value.data_mut()[0] = f64::INFINITY;
        let mut net = Sequential::new(vec![Box::new(conv)]);
        let x = random_input(&[1, 1, 4, 4], 7);
        let y = net.forward_train(x);
        let _ = net.backward(y);
    }

    #[test]
    fn gradients_match_finite_differences_for_core_layers() {
        let mut rng = derive_rng(0x33, 0, 0);
        let tol = 1e-4;
        let cases: Vec<(Box<dyn Layer>, Tensor)> = vec![
            (Box::new(Conv2d::new(2, 3, 3, 1, 1, &mut rng)), random_input(&[2, 2, 5, 5], 71)),
            (Box::new(Linear::new(6, 4, &mut rng)), random_input(&[3, 6], 72).reshape(&[3, 6])),
            (Box::new(BatchNorm2d::new(3)), random_input(&[2, 3, 3, 3], 73)),
            (Box::new(ResidualBlock::new(2, 3, 2, &mut rng)), random_input(&[2, 2, 5, 5], 74)),
        ];
        for (mut layer, x) in cases {
            let kind = layer.kind();
            let report = check_layer(layer.as_mut(), &x, 75, 1e-5);
            assert!(
                report.passes(tol),
                "{kind}: worst {} rel err {:.3e}",
                report.worst,
                report.max_rel_err
            );
        }
        let report = check_cross_entropy(4, 5, 76, 1e-6);
        assert!(report.passes(tol), "cross entropy rel err {:.3e}", report.max_rel_err);
    }
}
