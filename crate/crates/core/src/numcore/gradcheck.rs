//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

/// Denominator floor for the relative error, so near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error, if any coordinate was checked.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates where one-sided differences disagree, i.e. the probe sits on a kink.
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `f` at every coordinate of `params`.
pub fn grad_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(f, params, analytic, &coords, eps, tol)
}

/// Like [`grad_check`] but probes only the listed coordinates.
pub fn grad_check_coords<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Range(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut eval = |x: &[f64]| -> Result<f64> {
        let v = f(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("forward value {v}")))
        }
    };
    let f0 = eval(params)?;
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
        passed: true,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::Range(format!("coordinate {i} of {}", params.len())));
        }
        let orig = x[i];
        x[i] = orig + eps;
        let fp = eval(&x)?;
        x[i] = orig - eps;
        let fm = eval(&x)?;
        x[i] = orig;
        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        let numeric = (fp - fm) / (2.0 * eps);
        if (forward - backward).abs() > eps.sqrt() * (1.0 + analytic[i].abs()) {
            report.excluded.push(i);
            continue;
        }
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
