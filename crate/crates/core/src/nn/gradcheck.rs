use crate::error::{Error, Result};

/// Outcome of a finite-difference audit of an analytic gradient.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub n_params: usize,
}

/// Compares `analytic` against central finite differences of `f` at `point`.
///
/// The per-coordinate relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`, which stays meaningful when one side is
/// near zero. The closure is probed twice at `point` first; if the two
/// evaluations differ the closure is not deterministic and no finite
/// difference is trustworthy, so the check refuses to run.
pub fn gradient_check(
    f: impl Fn(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport> {
    if point.len() != analytic.len() {
        return Err(Error::Usage(format!(
            "gradient length {} does not match point length {}",
            analytic.len(),
            point.len()
        )));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let probe = f(point);
    if f(point) != probe {
        return Err(Error::CheckFailed(
            "closure is not deterministic: two evaluations at the same point differ".into(),
        ));
    }

    let mut x = point.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, n_params: point.len() })
}
