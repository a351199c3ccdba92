//! RAW classifier-input strategies: Packed-RAW quad rearrangement and the
//! bidirectional cross-modal attention (BCA) fusion front-end.
//!
//! Packing rearranges each Bayer 2x2 quad into four channels at half
//! spatial resolution. BCA extracts feature maps from the original mosaic
//! (spatial branch) and its packed form (color branch), then gates each map
//! element-wise by a sigmoid of a 1x1 convolution of the other. Both happen
//! inside the network, so neither adds dataset preprocessing work.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::isp::{CfaMosaic, IspError, LinearImage};
use crate::nn::layers::{Conv2d, Layer, ParamTensor, Relu, Sequential};
use crate::nn::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RawRepError {
    #[error("pack requires even dimensions, got {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("shape mismatch at fusion point: {0}")]
    FusionShape(String),
    #[error("invalid packed data: {0}")]
    InvalidPacked(String),
    #[error(transparent)]
    Isp(#[from] IspError),
}

/// Half-resolution 4-channel rearrangement of a mosaic. Channels follow quad
/// position (top-left, top-right, bottom-left, bottom-right), which reads as
/// (R, G1, G2, B) under the RGGB phase; other phases keep the positional
/// order with their own color semantics. Values are interleaved row-major:
/// `values[(y*width + x)*4 + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedQuads {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PackedQuads {
    pub const CHANNELS: usize = 4;

    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<PackedQuads, RawRepError> {
        if values.len() != width * height * Self::CHANNELS {
            return Err(RawRepError::InvalidPacked(format!(
                "expected {} values, got {}",
                width * height * Self::CHANNELS,
                values.len()
            )));
        }
        Ok(PackedQuads {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, k: usize) -> f64 {
        self.values[(y * self.width + x) * Self::CHANNELS + k]
    }
}

/// Rearrange a 1-channel image into quads: `out[y][x][k]` is the k-th entry
/// (TL, TR, BL, BR) of the 2x2 quad anchored at `(2x, 2y)`.
pub fn pack_image(img: &LinearImage) -> Result<PackedQuads, RawRepError> {
    if img.channels != 1 {
        return Err(RawRepError::InvalidPacked(format!(
            "pack expects a 1-channel image, got {}",
            img.channels
        )));
    }
    if img.width % 2 != 0 || img.height % 2 != 0 {
        return Err(RawRepError::OddDimensions {
            width: img.width,
            height: img.height,
        });
    }
    let (pw, ph) = (img.width / 2, img.height / 2);
    let mut values = vec![0.0; pw * ph * 4];
    for y in 0..ph {
        for x in 0..pw {
            let base = (y * pw + x) * 4;
            values[base] = img.at(2 * x, 2 * y, 0);
            values[base + 1] = img.at(2 * x + 1, 2 * y, 0);
            values[base + 2] = img.at(2 * x, 2 * y + 1, 0);
            values[base + 3] = img.at(2 * x + 1, 2 * y + 1, 0);
        }
    }
    PackedQuads::new(pw, ph, values)
}

/// Pack raw counts directly (exact: u16 -> f64 is lossless).
pub fn pack_mosaic(m: &CfaMosaic) -> Result<PackedQuads, RawRepError> {
    let img = LinearImage::new(
        m.width,
        m.height,
        1,
        m.samples.iter().map(|&s| s as f64).collect(),
    )?;
    pack_image(&img)
}

/// Exact inverse of [`pack_image`].
pub fn unpack(p: &PackedQuads) -> LinearImage {
    let (w, h) = (p.width * 2, p.height * 2);
    let mut out = LinearImage::zeros(w, h, 1);
    for y in 0..p.height {
        for x in 0..p.width {
            out.set(2 * x, 2 * y, 0, p.at(x, y, 0));
            out.set(2 * x + 1, 2 * y, 0, p.at(x, y, 1));
            out.set(2 * x, 2 * y + 1, 0, p.at(x, y, 2));
            out.set(2 * x + 1, 2 * y + 1, 0, p.at(x, y, 3));
        }
    }
    out
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// The two 1x1 gate convolutions of the fusion step. `spatial_*` is applied
/// to the spatial map (producing the gate for the color branch); `color_*`
/// is applied to the color map (gating the spatial branch).
#[derive(Debug, Clone)]
pub struct BcaGates {
    pub spatial_weight: Tensor, // [F, F]
    pub spatial_bias: Tensor,   // [F]
    pub color_weight: Tensor,   // [F, F]
    pub color_bias: Tensor,     // [F]
}

/// 1x1 convolution over NCHW: `y[n,o,p] = b[o] + sum_i w[o,i] * x[n,i,p]`.
fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let f = weight.dim(0);
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, f, h, w]);
    for img in 0..n {
        let x_img = &x.data()[img * c * hw..(img + 1) * c * hw];
        let y_img = &mut y.data_mut()[img * f * hw..(img + 1) * f * hw];
        for (o, chunk) in y_img.chunks_exact_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[o]);
        }
        crate::nn::tensor::matmul_acc(y_img, weight.data(), x_img, f, c, hw);
    }
    y
}

/// Bidirectional cross-modal gating of two feature maps:
///
/// `new_spatial = spatial ⊗ σ(conv1x1(color))`
/// `new_color   = color   ⊗ σ(conv1x1(spatial))`
///
/// Both gates are computed from the prior maps; there is no sequential
/// update.
pub fn bca_fuse(
    spatial: &Tensor,
    color: &Tensor,
    gates: &BcaGates,
) -> Result<(Tensor, Tensor), RawRepError> {
    if spatial.shape() != color.shape() {
        return Err(RawRepError::FusionShape(format!(
            "spatial {:?} vs color {:?}",
            spatial.shape(),
            color.shape()
        )));
    }
    if spatial.rank() != 4 {
        return Err(RawRepError::FusionShape(format!(
            "expected NCHW maps, got {:?}",
            spatial.shape()
        )));
    }
    let f = spatial.dim(1);
    for (name, t, want) in [
        ("spatial_weight", &gates.spatial_weight, vec![f, f]),
        ("color_weight", &gates.color_weight, vec![f, f]),
    ] {
        if t.shape() != want.as_slice() {
            return Err(RawRepError::FusionShape(format!(
                "{name} must be 1x1 ({f}->{f}), got {:?}",
                t.shape()
            )));
        }
    }
    if gates.spatial_bias.len() != f || gates.color_bias.len() != f {
        return Err(RawRepError::FusionShape("gate bias length mismatch".to_string()));
    }

    let mut gate_for_spatial = conv1x1(color, &gates.color_weight, &gates.color_bias);
    gate_for_spatial.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut gate_for_color = conv1x1(spatial, &gates.spatial_weight, &gates.spatial_bias);
    gate_for_color.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));

    Ok((spatial.hadamard(&gate_for_spatial), color.hadamard(&gate_for_color)))
}

/// Network layer form of packing: `[n, 1, 2h, 2w] -> [n, 4, h, w]` with
/// channels in quad order (TL, TR, BL, BR). A pure permutation, so backward
/// is the inverse scatter.
pub struct PackLayer {
    in_shape: Option<Vec<usize>>,
}

impl PackLayer {
    pub fn new() -> PackLayer {
        PackLayer { in_shape: None }
    }

    fn pack_tensor(x: &Tensor) -> Tensor {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(c, 1, "pack layer expects a 1-channel mosaic");
        assert!(h % 2 == 0 && w % 2 == 0, "pack layer requires even dimensions");
        let (ph, pw) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, 4, ph, pw]);
        let xd = x.data();
        let yd = y.data_mut();
        for img in 0..n {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut yd[img * 4 * ph * pw..(img + 1) * 4 * ph * pw];
            for py in 0..ph {
                for px in 0..pw {
                    let i0 = (2 * py) * w + 2 * px;
                    let pi = py * pw + px;
                    dst[pi] = src[i0];
                    dst[ph * pw + pi] = src[i0 + 1];
                    dst[2 * ph * pw + pi] = src[i0 + w];
                    dst[3 * ph * pw + pi] = src[i0 + w + 1];
                }
            }
        }
        y
    }
}

impl Default for PackLayer {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for PackLayer {
    fn kind(&self) -> &'static str {
        "pack"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.in_shape = Some(x.shape().to_vec());
        Self::pack_tensor(&x)
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        Self::pack_tensor(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let in_shape = self.in_shape.take().expect("pack backward without forward");
        let (n, _, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (ph, pw) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(&in_shape);
        let gd = grad.data();
        let dxd = dx.data_mut();
        for img in 0..n {
            let src = &gd[img * 4 * ph * pw..(img + 1) * 4 * ph * pw];
            let dst = &mut dxd[img * h * w..(img + 1) * h * w];
            for py in 0..ph {
                for px in 0..pw {
                    let i0 = (2 * py) * w + 2 * px;
                    let pi = py * pw + px;
                    dst[i0] = src[pi];
                    dst[i0 + 1] = src[ph * pw + pi];
                    dst[i0 + w] = src[2 * ph * pw + pi];
                    dst[i0 + w + 1] = src[3 * ph * pw + pi];
                }
            }
        }
        dx
    }
}

/// Number of feature channels both BCA stems produce.
pub const BCA_CHANNELS: usize = 16;
/// Channels after the merge convolution (the classifier input).
pub const BCA_MERGE_CHANNELS: usize = 16;

struct FuseCache {
    spatial: Tensor,
    color: Tensor,
    gate_for_spatial: Tensor,
    gate_for_color: Tensor,
}

/// BCA fusion front-end. Two stems (one 3x3 conv + ReLU each) extract a
/// spatial map from the full-resolution mosaic and a color map from its
/// packed form; a stride-2 conv aligns the spatial branch; the fused, gated
/// maps are concatenated and merged down to the classifier input.
pub struct BcaFrontend {
    pack: PackLayer,
    spatial_stem: Sequential,
    downscale: Sequential,
    color_stem: Sequential,
    gate_spatial: Conv2d, // applied to the spatial map
    gate_color: Conv2d,   // applied to the color map
    merge: Sequential,
    cache: Option<FuseCache>,
}

impl BcaFrontend {
    pub fn new(rng: &mut ChaCha8Rng) -> BcaFrontend {
        let f = BCA_CHANNELS;
        let spatial_stem = Sequential::new(vec![
            Box::new(Conv2d::new(1, f, 3, 1, 1, rng)),
            Box::new(Relu::new()),
        ]);
        let downscale = Sequential::new(vec![
            Box::new(Conv2d::new(f, f, 3, 2, 1, rng)),
            Box::new(Relu::new()),
        ]);
        let color_stem = Sequential::new(vec![
            Box::new(Conv2d::new(4, f, 3, 1, 1, rng)),
            Box::new(Relu::new()),
        ]);
        let mut gate_spatial = Conv2d::new(f, f, 1, 1, 0, rng);
        let mut gate_color = Conv2d::new(f, f, 1, 1, 0, rng);
        // Small-random gate weights, zero bias: early gating stays near the
        // neutral 0.5.
        for conv in [&mut gate_spatial, &mut gate_color] {
            conv.weight.value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        let merge = Sequential::new(vec![
            Box::new(Conv2d::new(2 * f, BCA_MERGE_CHANNELS, 3, 1, 1, rng)),
            Box::new(Relu::new()),
        ]);
        BcaFrontend {
            pack: PackLayer::new(),
            spatial_stem,
            downscale,
            color_stem,
            gate_spatial,
            gate_color,
            merge,
            cache: None,
        }
    }

    /// Gate parameters as plain tensors, matching the standalone
    /// [`bca_fuse`] signature.
    pub fn fuse_gates(&self) -> BcaGates {
        let f = BCA_CHANNELS;
        BcaGates {
            spatial_weight: Tensor::from_vec(&[f, f], self.gate_spatial.weight.value.data().to_vec()),
            spatial_bias: self.gate_spatial.bias.value.clone(),
            color_weight: Tensor::from_vec(&[f, f], self.gate_color.weight.value.data().to_vec()),
            color_bias: self.gate_color.bias.value.clone(),
        }
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    let cb = b.dim(1);
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let hw = h * w;
    for img in 0..n {
        let dst = &mut out.data_mut()[img * (ca + cb) * hw..(img + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[img * ca * hw..(img + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[img * cb * hw..(img + 1) * cb * hw]);
    }
    out
}

fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cb = c - ca;
    let hw = h * w;
    let mut a = Tensor::zeros(&[n, ca, h, w]);
    let mut b = Tensor::zeros(&[n, cb, h, w]);
    for img in 0..n {
        let src = &x.data()[img * c * hw..(img + 1) * c * hw];
        a.data_mut()[img * ca * hw..(img + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        b.data_mut()[img * cb * hw..(img + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    (a, b)
}

impl Layer for BcaFrontend {
    fn kind(&self) -> &'static str {
        "bca_frontend"
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let spatial = self.downscale.forward_train(self.spatial_stem.forward_train(x.clone()));
        let color = self.color_stem.forward_train(self.pack.forward_train(x));
        assert_eq!(
            spatial.shape(),
            color.shape(),
            "bca: branch shapes diverge at the fusion point"
        );
        let mut gate_for_color = self.gate_spatial.forward_train(spatial.clone());
        gate_for_color.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut gate_for_spatial = self.gate_color.forward_train(color.clone());
        gate_for_spatial.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let new_spatial = spatial.hadamard(&gate_for_spatial);
        let new_color = color.hadamard(&gate_for_color);
        let merged = self.merge.forward_train(concat_channels(&new_spatial, &new_color));
        self.cache = Some(FuseCache {
            spatial,
            color,
            gate_for_spatial,
            gate_for_color,
        });
        merged
    }

    fn forward_eval(&self, x: Tensor) -> Tensor {
        let spatial = self.downscale.forward_eval(self.spatial_stem.forward_eval(x.clone()));
        let color = self.color_stem.forward_eval(self.pack.forward_eval(x));
        let mut gate_for_color = self.gate_spatial.forward_eval(spatial.clone());
        gate_for_color.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut gate_for_spatial = self.gate_color.forward_eval(color.clone());
        gate_for_spatial.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let new_spatial = spatial.hadamard(&gate_for_spatial);
        let new_color = color.hadamard(&gate_for_color);
        self.merge.forward_eval(concat_channels(&new_spatial, &new_color))
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let FuseCache {
            spatial,
            color,
            gate_for_spatial,
            gate_for_color,
        } = self.cache.take().expect("bca backward without forward");
        let d_cat = self.merge.backward(grad);
        let (d_new_spatial, d_new_color) = split_channels(&d_cat, BCA_CHANNELS);

        // new_spatial = spatial ⊙ g_s where g_s = σ(gate_color(color)).
        let mut d_spatial = d_new_spatial.hadamard(&gate_for_spatial);
        let mut d_color = d_new_color.hadamard(&gate_for_color);

        // Through the gates: dσ = σ(1-σ).
        let mut d_pre_color_gate = d_new_spatial.hadamard(&spatial);
        for (v, &g) in d_pre_color_gate
            .data_mut()
            .iter_mut()
            .zip(gate_for_spatial.data().iter())
        {
            *v *= g * (1.0 - g);
        }
        d_color.add_assign(&self.gate_color.backward(d_pre_color_gate));

        let mut d_pre_spatial_gate = d_new_color.hadamard(&color);
        for (v, &g) in d_pre_spatial_gate
            .data_mut()
            .iter_mut()
            .zip(gate_for_color.data().iter())
        {
            *v *= g * (1.0 - g);
        }
        d_spatial.add_assign(&self.gate_spatial.backward(d_pre_spatial_gate));

        let d_packed = self.color_stem.backward(d_color);
        let mut dx = self.pack.backward(d_packed);
        let d_stem = self.downscale.backward(d_spatial);
        dx.add_assign(&self.spatial_stem.backward(d_stem));
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.spatial_stem.visit_params(&format!("{prefix}spatial_stem."), f);
        self.downscale.visit_params(&format!("{prefix}downscale."), f);
        self.color_stem.visit_params(&format!("{prefix}color_stem."), f);
        self.gate_spatial.visit_params(&format!("{prefix}gate_spatial."), f);
        self.gate_color.visit_params(&format!("{prefix}gate_color."), f);
        self.merge.visit_params(&format!("{prefix}merge."), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.spatial_stem.visit_buffers(&format!("{prefix}spatial_stem."), f);
        self.downscale.visit_buffers(&format!("{prefix}downscale."), f);
        self.color_stem.visit_buffers(&format!("{prefix}color_stem."), f);
        self.merge.visit_buffers(&format!("{prefix}merge."), f);
    }
}

#[cfg(test)]
mod tests;
