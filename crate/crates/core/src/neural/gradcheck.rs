use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences `(f(w+h) - f(w-h)) / 2h`
/// for every scalar parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T, F>(params: &[T], analytic: &[T], h: T, tol: f64, mut loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::invalid("gradient check", "step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::dims("analytic gradient", params.len(), analytic.len()));
    }
    let mut report = GradCheckReport {
        n_params: params.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        passed: true,
    };
    let mut w = params.to_vec();
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = loss(&w)?;
        w[i] = orig - h;
        let down = loss(&w)?;
        w[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("gradient check loss"));
        }
        let numeric = ((up - down) / (T::two() * h)).as_f64();
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err || i == 0 {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
