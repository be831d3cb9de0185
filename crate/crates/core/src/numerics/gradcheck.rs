//! Finite-difference verification of analytic gradients.
//!
//! Central differences: for each coordinate, perturb by ±eps, evaluate the
//! loss twice, and compare `(f(+) - f(-)) / (2 eps)` to the analytic value
//! under the relative error `|a - n| / max(|a|, |n|, 1e-8)`.

use crate::error::{Error, Result};

/// Smallest / largest step widths accepted; outside this window the
/// numerator is dominated by either truncation or round-off error.
pub const EPS_MIN: f64 = 1e-7;
pub const EPS_MAX: f64 = 1e-4;

/// Floor in the relative-error denominator so near-zero gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

/// Compare an analytic gradient against central differences of `loss_fn`
/// around `theta`. Returns the worst relative error over all coordinates.
///
/// `loss_fn` must be deterministic in `theta`; it is called twice per
/// coordinate with the same surrounding state.
pub fn grad_check(
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if analytic.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "gradient check: {} parameters but {} analytic gradients",
            theta.len(),
            analytic.len()
        )));
    }
    if !(EPS_MIN..=EPS_MAX).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps:e} outside [{EPS_MIN:e}, {EPS_MAX:e}]"
        )));
    }
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = loss_fn(&work)?;
        work[i] = orig - eps;
        let minus = loss_fn(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss not finite near coordinate {i}: f(+)={plus}, f(-)={minus}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
