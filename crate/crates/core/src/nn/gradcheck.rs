//! Central finite-difference verification of analytic gradients.
//!
//! The loss is a fixed random projection of the layer output, so every
//! output element contributes. Comparisons use the symmetric relative error
//! with a small-magnitude floor to ignore values below finite-difference
//! noise.

use rand::Rng;

use super::layers::{cross_entropy_grad, softmax_cross_entropy, Layer};
use super::model::Model;
use super::tensor::{dot, Tensor};
use crate::util::derive_rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs().max(numeric.abs()) < 1e-7 {
        return 0.0;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs())
}

fn update_worst(report: &mut GradCheckReport, err: f64, what: String) {
    report.checked += 1;
    if err > report.max_rel_err {
        report.max_rel_err = err;
        report.worst = what;
    }
}

struct ParamAccess;

impl ParamAccess {
    fn count(layer: &mut dyn Layer) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        layer.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.len())));
        out
    }

    fn nudge(layer: &mut dyn Layer, param_idx: usize, elem: usize, delta: f64) {
        let mut seen = 0usize;
        layer.visit_params("", &mut |_, p| {
            if seen == param_idx {
                p.value.data_mut()[elem] += delta;
            }
            seen += 1;
        });
    }

    fn grad(layer: &mut dyn Layer, param_idx: usize, elem: usize) -> f64 {
        let mut seen = 0usize;
        let mut g = 0.0;
        layer.visit_params("", &mut |_, p| {
            if seen == param_idx {
                g = p.grad.data()[elem];
            }
            seen += 1;
        });
        g
    }
}

/// Check analytic parameter and input gradients of a layer against central
/// finite differences of a projected loss `L = <forward(x), R>`.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, seed: u64, eps: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };

    // Fixed projection built from the output shape.
    let y0 = layer.forward_train(x.clone());
    let mut rng = derive_rng(seed, 0xfd, 0);
    let projection = Tensor::from_vec(
        y0.shape(),
        (0..y0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let loss = |layer: &mut dyn Layer, x: &Tensor| -> f64 {
        let y = layer.forward_train(x.clone());
        dot(y.data(), projection.data())
    };

    // Analytic pass.
    layer.visit_params("", &mut |_, p| p.grad.fill(0.0));
    let _ = loss(layer, x);
    let dx = layer.backward(projection.clone());

    // Parameter gradients.
    for (pi, (name, len)) in ParamAccess::count(layer).into_iter().enumerate() {
        for e in 0..len {
            let analytic = ParamAccess::grad(layer, pi, e);
            ParamAccess::nudge(layer, pi, e, eps);
            let lp = loss(layer, x);
            ParamAccess::nudge(layer, pi, e, -2.0 * eps);
            let lm = loss(layer, x);
            ParamAccess::nudge(layer, pi, e, eps);
            let numeric = (lp - lm) / (2.0 * eps);
            update_worst(&mut report, rel_err(analytic, numeric), format!("param {name}[{e}]"));
        }
    }

    // Input gradients.
    let mut xp = x.clone();
    for e in 0..x.len() {
        let analytic = dx.data()[e];
        xp.data_mut()[e] += eps;
        let lp = loss(layer, &xp);
        xp.data_mut()[e] -= 2.0 * eps;
        let lm = loss(layer, &xp);
        xp.data_mut()[e] += eps;
        let numeric = (lp - lm) / (2.0 * eps);
        update_worst(&mut report, rel_err(analytic, numeric), format!("input[{e}]"));
    }

    report
}

/// Check a whole model end to end under the real training loss.
pub fn check_model(model: &mut Model, x: &Tensor, labels: &[usize], eps: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let ce_loss = |model: &mut Model, x: &Tensor| -> f64 {
        let logits = model.forward_train(x.clone());
        softmax_cross_entropy(&logits, labels).expect("gradcheck loss").0
    };

    model.zero_grads();
    let logits = model.forward_train(x.clone());
    let (_, probs) = softmax_cross_entropy(&logits, labels).expect("gradcheck loss");
    model.backward(cross_entropy_grad(&probs, labels));

    for (pi, (name, len)) in ParamAccess::count(&mut model.net).into_iter().enumerate() {
        for e in 0..len {
            let analytic = ParamAccess::grad(&mut model.net, pi, e);
            ParamAccess::nudge(&mut model.net, pi, e, eps);
            let lp = ce_loss(model, x);
            ParamAccess::nudge(&mut model.net, pi, e, -2.0 * eps);
            let lm = ce_loss(model, x);
            ParamAccess::nudge(&mut model.net, pi, e, eps);
            let numeric = (lp - lm) / (2.0 * eps);
            update_worst(&mut report, rel_err(analytic, numeric), format!("param {name}[{e}]"));
        }
    }
    report
}

/// Check the cross-entropy logit gradient itself.
pub fn check_cross_entropy(n: usize, classes: usize, seed: u64, eps: f64) -> GradCheckReport {
    let mut rng = derive_rng(seed, 0xce, 0);
    let logits = Tensor::from_vec(
        &[n, classes],
        (0..n * classes).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    );
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let (_, probs) = softmax_cross_entropy(&logits, &labels).expect("gradcheck logits");
    let analytic = cross_entropy_grad(&probs, &labels);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut pert = logits.clone();
    for e in 0..pert.len() {
        pert.data_mut()[e] += eps;
        let lp = softmax_cross_entropy(&pert, &labels).unwrap().0;
        pert.data_mut()[e] -= 2.0 * eps;
        let lm = softmax_cross_entropy(&pert, &labels).unwrap().0;
        pert.data_mut()[e] += eps;
        let numeric = (lp - lm) / (2.0 * eps);
        update_worst(&mut report, rel_err(analytic.data()[e], numeric), format!("logit[{e}]"));
    }
    report
}

/// Random NCHW tensor with entries away from ReLU/maxpool kinks.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = derive_rng(seed, 0x1417, 0);
    Tensor::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| {
                let v: f64 = rng.gen_range(0.15..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}
