//! Drop/grow mask updates.
//!
//! Both rules drop the `k = floor(f·target_active)` active weights of
//! smallest magnitude. RigL regrows the inactive positions with the largest
//! dense-gradient magnitude, SET regrows uniformly at random. Grow candidates
//! are the positions inactive before the update, so a weight dropped in this
//! round cannot come straight back. Ties go to the lowest flat index.

use std::cmp::Ordering;

use num_traits::Float;
use rand::seq::index;
use rand::Rng;

use crate::mask::{MaskError, SparseMask};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateOutcome {
    pub dropped: Vec<u32>,
    pub grown: Vec<u32>,
    pub shortfall: usize,
}

fn abs_cmp<T: Float>(values: &[T], a: u32, b: u32) -> Ordering {
    let (x, y) = (values[a as usize].abs(), values[b as usize].abs());
    x.partial_cmp(&y).unwrap_or(Ordering::Equal)
}

/// Chooses the `k` weakest active weights. Returns the drop list (sorted),
/// the number of requested drops that were cut for lack of grow candidates
/// and the grow candidates.
fn plan_drop<T: Float>(
    weights: &[T],
    mask: &SparseMask,
    fraction: f64,
) -> Result<(Vec<u32>, usize, Vec<u32>), MaskError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MaskError::InvalidFraction(fraction));
    }
    mask.check_len(weights.len())?;
    let requested =
        ((fraction * mask.target_active() as f64).floor() as usize).min(mask.active_count());
    let candidates: Vec<u32> = (0..mask.len() as u32)
        .filter(|&i| !mask.is_active(i as usize))
        .collect();
    let k = requested.min(candidates.len());
    let mut ranked = mask.active().to_vec();
    ranked.sort_by(|&a, &b| abs_cmp(weights, a, b).then(a.cmp(&b)));
    let mut dropped = ranked[..k].to_vec();
    dropped.sort_unstable();
    Ok((dropped, requested - k, candidates))
}

fn commit<T: Float>(
    weights: &mut [T],
    mask: &mut SparseMask,
    mut dropped: Vec<u32>,
    mut grown: Vec<u32>,
    shortfall: usize,
    step: u64,
) -> UpdateOutcome {
    dropped.sort_unstable();
    grown.sort_unstable();
    for &i in dropped.iter().chain(&grown) {
        weights[i as usize] = T::zero();
    }
    mask.swap(&dropped, &grown, step, shortfall);
    UpdateOutcome {
        dropped,
        grown,
        shortfall,
    }
}

/// RigL: magnitude drop, gradient-magnitude grow. Grown weights start at zero;
/// the caller must reset their optimizer state.
pub fn rigl_update<T: Float>(
    weights: &mut [T],
    dense_grad: &[T],
    mask: &mut SparseMask,
    fraction: f64,
    step: u64,
) -> Result<UpdateOutcome, MaskError> {
    mask.check_len(dense_grad.len())?;
    let (dropped, shortfall, mut candidates) = plan_drop(weights, mask, fraction)?;
    let k = dropped.len();
    candidates.sort_by(|&a, &b| abs_cmp(dense_grad, b, a).then(a.cmp(&b)));
    candidates.truncate(k);
    Ok(commit(weights, mask, dropped, candidates, shortfall, step))
}

/// SET: magnitude drop, uniform random grow.
pub fn set_update<T: Float, R: Rng + ?Sized>(
    weights: &mut [T],
    mask: &mut SparseMask,
    fraction: f64,
    rng: &mut R,
    step: u64,
) -> Result<UpdateOutcome, MaskError> {
    let (dropped, shortfall, candidates) = plan_drop(weights, mask, fraction)?;
    let k = dropped.len();
    let grown = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok(commit(weights, mask, dropped, grown, shortfall, step))
}
