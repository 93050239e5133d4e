//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Compares the analytic gradient returned by `f` against central finite
/// differences at `x0`. `f` maps a parameter vector to (loss, gradient).
///
/// Returns the maximum over coordinates of
/// |analytic - central| / max(1, |central|).
pub fn grad_check<F>(f: F, x0: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidConfig(format!("grad_check step {step}")));
    }
    let (loss0, analytic) = f(x0)?;
    if !loss0.is_finite() {
        return Err(Error::NonFiniteInput("grad_check base evaluation".into()));
    }
    if analytic.len() != x0.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x0.len()
        )));
    }
    let mut worst = 0.0_f64;
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (plus, _) = f(&x)?;
        x[i] = orig - step;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "grad_check perturbation at coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
