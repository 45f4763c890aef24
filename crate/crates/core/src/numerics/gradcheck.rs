use super::rng::Rng;
use crate::error::{invalid, Error, Result};

/// Coordinates checked at most per call; larger vectors are subsampled.
pub const MAX_CHECKED_COORDS: usize = 256;

/// Central-difference gradient check on a uniformly sampled coordinate subset.
///
/// Returns the maximum over checked coordinates of
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, theta: &[f64], analytic: &[f64], eps: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords = if theta.len() <= MAX_CHECKED_COORDS {
        (0..theta.len()).collect()
    } else {
        rng.sample_indices(theta.len(), MAX_CHECKED_COORDS)
    };
    grad_check_coords(loss_fn, theta, analytic, eps, &coords)
}

/// Same as [`grad_check`] over an explicit coordinate list.
pub fn grad_check_coords<F>(mut loss_fn: F, theta: &[f64], analytic: &[f64], eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 || !eps.is_finite() {
        return invalid("finite-difference step must be positive");
    }
    if theta.len() != analytic.len() {
        return invalid(format!(
            "parameter length {} != gradient length {}",
            theta.len(),
            analytic.len()
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= theta.len() {
            return invalid(format!("coordinate {i} out of range"));
        }
        probe[i] = theta[i] + eps;
        let plus = loss_fn(&probe);
        probe[i] = theta[i] - eps;
        let minus = loss_fn(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric {
                step: None,
                block: None,
                detail: format!("non-finite loss probing coordinate {i}"),
            });
        }
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic[i];
        let denom = fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max((fd - an).abs() / denom);
    }
    Ok(worst)
}
