//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::Tensor;

/// Minimum number of coordinates probed on large tensors.
pub const MIN_SAMPLED_COORDS: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Relative error with the denominator floored at 1. Gradients of the losses
/// checked here are O(1..100); sub-unit coordinates are measured against an
/// absolute scale instead, which keeps the f32 forward-rounding noise floor
/// from dominating coordinates whose contribution is negligible.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares `analytic` against central finite differences of `f` at `point`.
///
/// Perturbed coordinates are rounded to f32 storage before evaluation and the
/// divisor is the actually realized step `fl(x+eps) - fl(x-eps)`, so smooth
/// (polynomial) test functions are exact up to the rounding inside `f`.
/// All coordinates are probed when the tensor is small; otherwise a random
/// subset of `max(max_coords, 64)` distinct coordinates. `f` may return `None`
/// to veto a coordinate (used to exclude perturbations that cross a ReLU kink);
/// vetoed coordinates count as `skipped`.
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    analytic: &Tensor,
    step: f32,
    max_coords: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    F: Fn(&Tensor) -> Option<f64>,
{
    assert_eq!(point.shape(), analytic.shape(), "gradient shape mismatch");
    let n = point.len();
    let budget = max_coords.max(MIN_SAMPLED_COORDS);
    let coords: Vec<usize> = if n <= budget {
        (0..n).collect()
    } else {
        sample(rng, n, budget).into_vec()
    };

    let mut work = point.clone();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for &c in &coords {
        let x = point.data()[c];
        let x_plus = x + step;
        let x_minus = x - step;
        work.data_mut()[c] = x_plus;
        let f_plus = f(&work);
        work.data_mut()[c] = x_minus;
        let f_minus = f(&work);
        work.data_mut()[c] = x;
        let (fp, fm) = match (f_plus, f_minus) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                skipped += 1;
                continue;
            }
        };
        let realized = x_plus as f64 - x_minus as f64;
        let numeric = (fp - fm) / realized;
        let err = rel_err(analytic.data()[c] as f64, numeric);
        if err > max_rel_err {
            max_rel_err = err;
        }
        checked += 1;
    }
    GradCheckReport {
        max_rel_err,
        checked,
        skipped,
    }
}
