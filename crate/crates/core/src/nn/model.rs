//! Tiny VGG- and ResNet-style classifiers sized for 40x40 inputs and CPU
//! training.

use rand_chacha::ChaCha8Rng;

use super::layers::{
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2x2, ParamTensor, Relu,
    ResidualBlock, Sequential,
};
use super::tensor::Tensor;
use super::{shape_err, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Conv-ReLU-pool stages followed by two fully connected layers.
    TinyVgg,
    /// Strided stem, three residual basic blocks, global average pool, FC.
    TinyResnet,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::TinyVgg, Architecture::TinyResnet];

    pub fn code(self) -> u8 {
        match self {
            Architecture::TinyVgg => 0,
            Architecture::TinyResnet => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Architecture> {
        match code {
            0 => Some(Architecture::TinyVgg),
            1 => Some(Architecture::TinyResnet),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Option<Architecture> {
        match text {
            "tiny-vgg" => Some(Architecture::TinyVgg),
            "tiny-resnet" => Some(Architecture::TinyResnet),
            _ => None,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::TinyVgg => "tiny-vgg",
            Architecture::TinyResnet => "tiny-resnet",
        })
    }
}

/// Classifier shape. Channel widths scale with `width_multiplier`; the
/// parameter count is a deterministic function of the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub width_multiplier: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_channels == 0 || ![1, 3, 4, 16].contains(&self.input_channels) {
            return Err(NnError::InvalidSpec(format!(
                "input_channels must be one of 1, 3, 4, 16; got {}",
                self.input_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(NnError::InvalidSpec(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }
}

fn scaled(base: usize, multiplier: f64) -> usize {
    ((base as f64 * multiplier).round() as usize).max(1)
}

/// VGG stage widths at multiplier 1.0.
pub const VGG_BASE_CHANNELS: [usize; 3] = [8, 16, 32];
pub const VGG_BASE_HIDDEN: usize = 64;
/// ResNet stage widths at multiplier 1.0.
pub const RESNET_BASE_CHANNELS: [usize; 3] = [16, 32, 64];

/// A built classifier: a layer chain plus the spec it was built from.
pub struct Model {
    pub net: Sequential,
    pub spec: ModelSpec,
    residual_blocks: usize,
}

impl Model {
    /// Wrap an externally assembled layer chain (used by the pipeline
    /// variants that prepend rearrangement layers).
    pub fn compose(net: Sequential, spec: ModelSpec, residual_blocks: usize) -> Model {
        Model {
            net,
            spec,
            residual_blocks,
        }
    }

    pub fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.net.forward_train(x)
    }

    pub fn forward_eval(&self, x: Tensor) -> Tensor {
        self.net.forward_eval(x)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        self.net.backward(grad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.net.visit_params("", f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.visit_buffers("", f);
    }

    /// Number of trainable parameters (weights, biases, norm affines).
    pub fn param_count(&mut self) -> usize {
        let mut count = 0usize;
        self.visit_params(&mut |_, p| count += p.value.len());
        count
    }

    pub fn residual_block_count(&self) -> usize {
        self.residual_blocks
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.grad.fill(0.0));
    }
}

fn pool_or_err(size: usize, arch: &str) -> Result<usize, NnError> {
    if size < 2 {
        return Err(NnError::InvalidSpec(format!(
            "{arch}: input too small for the downsampling chain (spatial size {size} before pool)"
        )));
    }
    Ok(size / 2)
}

fn build_tiny_vgg(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model, NnError> {
    let channels: Vec<usize> = VGG_BASE_CHANNELS
        .iter()
        .map(|&c| scaled(c, spec.width_multiplier))
        .collect();
    let hidden = scaled(VGG_BASE_HIDDEN, spec.width_multiplier);
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut in_c = spec.input_channels;
    let mut size = spec.input_size;
    for &out_c in &channels {
        layers.push(Box::new(Conv2d::new(in_c, out_c, 3, 1, 1, rng)));
        layers.push(Box::new(Relu::new()));
        layers.push(Box::new(MaxPool2x2::new()));
        size = pool_or_err(size, "tiny-vgg")?;
        in_c = out_c;
    }
    let flat = in_c * size * size;
    layers.push(Box::new(Flatten::new()));
    layers.push(Box::new(Linear::new(flat, hidden, rng)));
    layers.push(Box::new(Relu::new()));
    layers.push(Box::new(Linear::new(hidden, spec.num_classes, rng)));
    Ok(Model {
        net: Sequential::new(layers),
        spec: spec.clone(),
        residual_blocks: 0,
    })
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn build_tiny_resnet(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model, NnError> {
    let channels: Vec<usize> = RESNET_BASE_CHANNELS
        .iter()
        .map(|&c| scaled(c, spec.width_multiplier))
        .collect();
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut size = spec.input_size;
    if size < 3 {
        return Err(NnError::InvalidSpec(format!(
            "tiny-resnet: input size {size} too small for the strided stem"
        )));
    }
    layers.push(Box::new(Conv2d::new(spec.input_channels, channels[0], 3, 2, 1, rng)));
    layers.push(Box::new(BatchNorm2d::new(channels[0])));
    layers.push(Box::new(Relu::new()));
    size = conv_out(size, 3, 2, 1);
    layers.push(Box::new(MaxPool2x2::new()));
    size = pool_or_err(size, "tiny-resnet")?;
    layers.push(Box::new(ResidualBlock::new(channels[0], channels[0], 1, rng)));
    layers.push(Box::new(ResidualBlock::new(channels[0], channels[1], 2, rng)));
    size = conv_out(size, 3, 2, 1);
    layers.push(Box::new(ResidualBlock::new(channels[1], channels[2], 2, rng)));
    size = conv_out(size, 3, 2, 1);
    if size == 0 {
        return Err(NnError::InvalidSpec(
            "tiny-resnet: downsampling chain exhausted the input".to_string(),
        ));
    }
    layers.push(Box::new(GlobalAvgPool::new()));
    layers.push(Box::new(Linear::new(channels[2], spec.num_classes, rng)));
    Ok(Model {
        net: Sequential::new(layers),
        spec: spec.clone(),
        residual_blocks: 3,
    })
}

/// Build a freshly initialized classifier. Initialization draws from `rng`
/// in a fixed order, so equal seeds give identical parameters.
pub fn build_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model, NnError> {
    spec.validate()?;
    match spec.architecture {
        Architecture::TinyVgg => build_tiny_vgg(spec, rng),
        Architecture::TinyResnet => build_tiny_resnet(spec, rng),
    }
}

/// Validate that a batch matches the spec's input geometry.
pub fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<(), NnError> {
    if x.rank() != 4 || x.dim(1) != spec.input_channels || x.dim(2) != spec.input_size || x.dim(3) != spec.input_size {
        return Err(shape_err(
            "model input",
            format!(
                "expected [n, {}, {}, {}], got {:?}",
                spec.input_channels, spec.input_size, spec.input_size,
                x.shape()
            ),
        ));
    }
    Ok(())
}
