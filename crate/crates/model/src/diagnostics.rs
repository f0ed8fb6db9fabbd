//! Numerical self-checks shared by the property and acceptance suites.

use crate::params::ParamId;
use crate::{EmotionModel, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    /// Largest `|a − n| / max(|a| + |n|, 1e-6)` seen.
    pub worst_relative_error: f64,
}

/// Compares every analytic partial derivative of the loss with a
/// five-point finite difference of step `h`. Parameters are restored
/// afterwards.
///
/// The stencil's O(h⁴) truncation error lets `h` stay large enough that
/// loss round-off (about 1e-16 / h) does not swamp tiny gradients.
pub fn gradient_check(model: &mut EmotionModel, samples: &[TrainSample], h: f64) -> GradientCheck {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for s in samples {
        let (_, grads, _) = model.loss_and_grads(&s.input, s.label);
        for (pi, g) in grads.iter().enumerate() {
            let id = ParamId(pi);
            for k in 0..g.data.len() {
                let orig = model.params().get(id).data[k];
                let mut at = |x: f64| {
                    model.params_mut().get_mut(id).data[k] = x;
                    model.loss(&s.input, s.label)
                };
                let numeric =
                    (-at(orig + 2.0 * h) + 8.0 * at(orig + h) - 8.0 * at(orig - h) + at(orig - 2.0 * h)) / (12.0 * h);
                model.params_mut().get_mut(id).data[k] = orig;
                let analytic = g.data[k];
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    GradientCheck {
        checked,
        worst_relative_error: worst,
    }
}
