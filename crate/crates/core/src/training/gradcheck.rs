use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::model::TrackModel;

use super::{backward, sequence_nll, TrajectorySample};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub total: usize,
    pub checked: usize,
    /// Largest `|g_a - g_n| / max(1, |g_a|, |g_n|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

/// Compares analytic gradients with central differences. Above `max_coords`
/// parameters a seeded random subset of that size is checked.
pub fn grad_check(
    model: &TrackModel,
    sample: &TrajectorySample,
    epsilon: f64,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(model, sample)?;
    grad_check_against(model, sample, &grads.flatten(), epsilon, tolerance, max_coords, seed)
}

/// As [`grad_check`], against a caller-supplied flattened gradient.
pub fn grad_check_against(
    model: &TrackModel,
    sample: &TrajectorySample,
    analytic: &[f64],
    epsilon: f64,
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in (0, 1e-2], got {epsilon}"
        )));
    }
    let base = model.flatten();
    if analytic.len() != base.len() {
        return Err(shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            base.len()
        )));
    }
    let total = base.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, total, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };
    let errors: Vec<(usize, f64)> = coords
        .par_iter()
        .map(|&i| -> Result<(usize, f64)> {
            let eval = |delta: f64| -> Result<f64> {
                let mut values = base.clone();
                values[i] += delta;
                let mut m = model.clone();
                m.set_flat(&values)?;
                sequence_nll(&m, sample)
            };
            let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            Ok((i, rel))
        })
        .collect::<Result<_>>()?;
    let worst = errors
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let max_rel_error = worst.map_or(0.0, |w| w.1);
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        total,
        checked: coords.len(),
        max_rel_error,
        worst_index: worst.map(|w| w.0),
        passed: max_rel_error < tolerance,
    })
}
