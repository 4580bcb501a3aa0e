//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::HaploError;
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Per-parameter comparison of reverse-mode and central-difference gradients.
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare the reverse-mode gradient of `loss_fn` against central finite
/// differences, element by element, at step `h`. `loss_fn` must be a pure
/// function of the current parameter values. Frozen parameters are required
/// to receive an exactly-zero gradient.
pub fn finite_difference_check(
    mut loss_fn: impl FnMut() -> Tensor<f64>,
    params: &[Parameter<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, HaploError> {
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = loss_fn();
    if !loss.item().is_finite() {
        return Err(HaploError::OracleFailure(format!(
            "non-finite loss {} at base point",
            loss.item()
        )));
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.tensor.grad()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    for (p, grad) in params.iter().zip(&analytic) {
        if !p.trainable() {
            // Freeze contract: gradient entries are exactly zero.
            let nonzero = grad.iter().any(|&g| g != 0.0);
            if nonzero {
                return Err(HaploError::OracleFailure(format!(
                    "frozen parameter {} received a nonzero gradient",
                    p.name
                )));
            }
            per_param.push((p.name.clone(), 0.0));
            continue;
        }
        let base = p.tensor.data();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut d = base.clone();
            d[i] = base[i] + h;
            p.tensor.set_data(&d);
            let up = loss_fn().item();
            d[i] = base[i] - h;
            p.tensor.set_data(&d);
            let down = loss_fn().item();
            d[i] = base[i];
            p.tensor.set_data(&d);
            if !up.is_finite() || !down.is_finite() {
                return Err(HaploError::OracleFailure(format!(
                    "non-finite loss while perturbing {}[{}]",
                    p.name, i
                )));
            }
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((p.name.clone(), worst));
    }
    let _ = tol;
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
    })
}
