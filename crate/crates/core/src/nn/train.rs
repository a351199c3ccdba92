//! Deterministic single-threaded training loop with best-checkpoint
//! selection by validation loss.

use rand::seq::SliceRandom;

use super::checkpoint::snapshot;
use super::layers::{argmax_rows, cross_entropy_grad, softmax_cross_entropy};
use super::model::{check_input, Model};
use super::optim::sgd_momentum_step;
use super::tensor::Tensor;
use super::NnError;
use crate::util::derive_rng;

const SHUFFLE_TAG: u64 = 0x5875_ff1e;

/// Shared hyperparameters. Defaults follow the experiment configuration:
/// learning rate 0.001, weight decay 0.0001, momentum 0.9, with the batch
/// size scaled down to 32 for CPU training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(NnError::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// A split materialized as one input tensor `[n, c, h, w]` plus labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<LabeledSet, NnError> {
        if inputs.rank() != 4 {
            return Err(super::shape_err(
                "labeled set",
                format!("inputs must be [n, c, h, w], got {:?}", inputs.shape()),
            ));
        }
        if inputs.dim(0) != labels.len() {
            return Err(super::shape_err(
                "labeled set",
                format!("{} inputs vs {} labels", inputs.dim(0), labels.len()),
            ));
        }
        Ok(LabeledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the given samples into a fresh batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sample_len = self.inputs.len() / self.len().max(1);
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        let src = self.inputs.data();
        for &i in indices {
            data.extend_from_slice(&src[i * sample_len..(i + 1) * sample_len]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Named parameter and buffer tensors from the best epoch. The model is
    /// left restored to this state when training returns.
    pub best_state: Vec<(String, Tensor)>,
}

/// Mean loss and top-1 accuracy over a split, in eval mode, batched.
pub fn eval_loss_acc(model: &Model, set: &LabeledSet, batch_size: usize) -> (f64, f64) {
    assert!(!set.is_empty(), "evaluate called on an empty split");
    let n = set.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (batch, labels) = set.gather(&indices);
        let logits = model.forward_eval(batch);
        let (loss, probs) = softmax_cross_entropy(&logits, &labels).expect("evaluation batch");
        loss_sum += loss * labels.len() as f64;
        for (pred, &want) in argmax_rows(&probs).into_iter().zip(labels.iter()) {
            if pred == want {
                correct += 1;
            }
        }
        start = end;
    }
    (loss_sum / n as f64, correct as f64 / n as f64)
}

/// Top-1 accuracy: fraction of samples whose argmax logit equals the label,
/// ties broken by the lowest class index. Order-invariant by construction.
pub fn evaluate(model: &Model, set: &LabeledSet) -> f64 {
    eval_loss_acc(model, set, 64).1
}

/// Train with SGD+momentum; keep the parameters from the epoch with the
/// lowest validation loss. Deterministic for a fixed seed: initialization,
/// shuffle order and arithmetic are all fixed.
pub fn train(
    model: &mut Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(NnError::EmptySplit("validation"));
    }
    check_input(&model.spec, &train_set.inputs)?;
    check_input(&model.spec, &val_set.inputs)?;

    let n = train_set.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val_loss = f64::INFINITY;
    let mut best_state: Option<Vec<(String, Tensor)>> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = derive_rng(cfg.seed, epoch as u64, SHUFFLE_TAG);
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, labels) = train_set.gather(chunk);
            let logits = model.forward_train(batch);
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            loss_sum += loss * labels.len() as f64;
            for (pred, &want) in argmax_rows(&probs).into_iter().zip(labels.iter()) {
                if pred == want {
                    correct += 1;
                }
            }
            let grad = cross_entropy_grad(&probs, &labels);
            model.backward(grad);
            sgd_momentum_step(model, cfg);
        }

        let train_loss = loss_sum / n as f64;
        let train_acc = correct as f64 / n as f64;
        let (val_loss, val_acc) = eval_loss_acc(model, val_set, cfg.batch_size.max(32));
        if !val_loss.is_finite() {
            return Err(NnError::Diverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_state = Some(snapshot(model));
        }
    }

    let best_state = best_state.expect("at least one epoch ran");
    super::checkpoint::restore(model, &best_state)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        best_state,
    })
}
