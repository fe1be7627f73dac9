//! Central finite-difference checks of hand-written backward passes.
//!
//! The numerical side only ever calls `forward`, so it stays independent of
//! the analytic gradients it is compared against.

use crate::error::Result;
use crate::models::{Sae, Seeds};
use crate::numeric::Matrix;

/// Denominator floor for relative errors, so exact-zero gradients compare
/// against finite-difference noise rather than against zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub worst_relative_error: f64,
    pub worst_param: &'static str,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Mean squared reconstruction error `(1/n) Σ ‖x̂ - target‖²` and its seed.
pub fn reconstruction_loss(recon: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = recon.sub(target)?;
    let n = recon.rows().max(1) as f64;
    Ok((diff.frobenius_sq() / n, diff.scale(2.0 / n)))
}

/// Compares every parameter gradient of the reconstruction loss against
/// central differences with the given step.
pub fn check_reconstruction_gradients<S: Sae + Clone>(
    model: &S,
    x: &Matrix,
    step: f64,
) -> Result<GradCheckReport> {
    let fwd = model.forward_train(x)?;
    let (_, seed) = reconstruction_loss(&fwd.recon, x)?;
    let grads = model.backward(&fwd, &Seeds::reconstruction_only(seed))?;

    let loss_at = |m: &S| -> Result<f64> { Ok(reconstruction_loss(&m.forward(x)?.recon, x)?.0) };

    let mut report = GradCheckReport {
        worst_relative_error: 0.0,
        worst_param: "",
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = model.clone();
    for (p_idx, (name, analytic)) in grads.iter().enumerate() {
        for i in 0..analytic.as_slice().len() {
            let original = probe.params()[p_idx].1.as_slice()[i];
            probe.params_mut()[p_idx].1.as_mut_slice()[i] = original + step;
            let plus = loss_at(&probe)?;
            probe.params_mut()[p_idx].1.as_mut_slice()[i] = original - step;
            let minus = loss_at(&probe)?;
            probe.params_mut()[p_idx].1.as_mut_slice()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[i];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.worst_relative_error || report.worst_param.is_empty() {
                report.worst_relative_error = err;
                report.worst_param = name;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
