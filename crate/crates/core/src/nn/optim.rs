//! SGD with momentum, classic L2-in-gradient form:
//!
//! `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`

use super::layers::ParamTensor;
use super::model::Model;
use super::train::TrainConfig;

/// One update on a single parameter tensor. Weight decay is skipped when the
/// parameter opted out (biases, norm affines). Clears the gradient.
pub fn sgd_step_param(param: &mut ParamTensor, lr: f64, momentum: f64, weight_decay: f64) {
    let wd = if param.apply_weight_decay { weight_decay } else { 0.0 };
    let value = param.value.data_mut();
    let grad = param.grad.data_mut();
    let vel = param.momentum.data_mut();
    for i in 0..value.len() {
        let g = grad[i] + wd * value[i];
        vel[i] = momentum * vel[i] + g;
        value[i] -= lr * vel[i];
        grad[i] = 0.0;
    }
}

/// Apply one optimizer step to every parameter of the model.
pub fn sgd_momentum_step(model: &mut Model, cfg: &TrainConfig) {
    let (lr, mom, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    model.visit_params(&mut |_, p| sgd_step_param(p, lr, mom, wd));
}
