//! Minimal from-scratch CNN stack: dense tensors, a fixed layer menu,
//! softmax cross-entropy, SGD with momentum, tiny VGG- and ResNet-style
//! classifiers, deterministic training and a versioned checkpoint format.
//!
//! Everything runs on 64-bit floats so training is bit-reproducible for a
//! fixed seed on a given machine.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, restore, save_checkpoint, snapshot, CheckpointMeta};
pub use layers::{
    argmax_rows, conv2d_forward, cross_entropy_grad, softmax_cross_entropy, zero_grads,
    BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2x2, ParamTensor, Relu,
    ResidualBlock, Sequential,
};
pub use model::{build_model, Architecture, Model, ModelSpec};
pub use optim::{sgd_momentum_step, sgd_step_param};
pub use tensor::Tensor;
pub use train::{evaluate, train, EpochStats, LabeledSet, TrainConfig, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {message}")]
    Shape { op: &'static str, message: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, message: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        message: message.into(),
    }
}
