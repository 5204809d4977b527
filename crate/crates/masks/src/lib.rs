//! Unstructured sparsity masks and their update rules.
//!
//! A [`SparseMask`] holds the set of active positions of one weight tensor.
//! Its active count is fixed at initialization and every drop/grow update
//! preserves it; only [`SparseMask::densify`] changes it.

mod mask;
mod schedule;
mod update;

pub use mask::{MaskError, SparseMask, UpdateRecord};
pub use schedule::{MaskMethod, MaskSchedule};
pub use update::{rigl_update, set_update, UpdateOutcome};

/// Uniform random mask with `round((1 - s)·N)` active positions.
pub fn init_mask(shape: &[usize], sparsity: f64, seed: u64) -> Result<SparseMask, MaskError> {
    SparseMask::random(shape, sparsity, seed)
}

pub fn densify(mask: &mut SparseMask) {
    mask.densify();
}

pub fn drop_fraction(schedule: &MaskSchedule, step: u64) -> f64 {
    schedule.drop_fraction(step)
}
