use serde::Serialize;

use super::{flatten, unflatten, Parameterized, Tensor};

/// Agreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|)` over entries above the absolute floor.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Absolute differences below this never fail a check.
pub const ABS_FLOOR: f64 = 1e-7;

/// Compares `analytic` with central differences of `f` around `x`.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut point = x.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = 0;
    let mut passed = true;
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = if abs <= ABS_FLOOR {
            0.0
        } else {
            abs / a.abs().max(numeric.abs())
        };
        if abs > max_abs {
            max_abs = abs;
        }
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        if rel >= tol {
            passed = false;
        }
    }
    GradCheckReport {
        max_relative_error: max_rel,
        max_absolute_error: max_abs,
        worst_index: worst,
        checked: x.len(),
        tolerance: tol,
        passed,
    }
}

/// [`grad_check`] over a parameter tree; `analytic` follows visiting order.
pub fn grad_check_params<T: Parameterized<Tensor> + Clone>(
    f: impl Fn(&T) -> f64,
    params: &T,
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let x = flatten(params);
    let flat: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
    grad_check(
        |v| {
            let mut p = params.clone();
            unflatten(&mut p, v);
            f(&p)
        },
        &x,
        &flat,
        h,
        tol,
    )
}
