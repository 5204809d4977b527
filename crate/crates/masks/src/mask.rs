use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("sparsity must lie in [0, 1), got {0}")]
    InvalidSparsity(f64),
    #[error("active count {active} exceeds {positions} positions")]
    TooManyActive { active: usize, positions: usize },
    #[error("mask indices must be strictly increasing (at position {0})")]
    Unsorted(usize),
    #[error("mask index {index} out of bounds for {positions} positions")]
    OutOfBounds { index: u32, positions: usize },
    #[error("length mismatch: mask covers {expected} positions, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("drop fraction must lie in [0, 1), got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub dropped: usize,
    pub grown: usize,
    /// Requested drops that could not be matched by a grow candidate.
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    shape: Vec<usize>,
    active: Vec<u32>,
    bits: Vec<bool>,
    target_active: usize,
    seed: u64,
    update_log: Vec<UpdateRecord>,
}

impl SparseMask {
    pub fn random(shape: &[usize], sparsity: f64, seed: u64) -> Result<Self, MaskError> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(MaskError::InvalidSparsity(sparsity));
        }
        let n: usize = shape.iter().product();
        let count = ((1.0 - sparsity) * n as f64).round() as usize;
        Self::random_with_count(shape, count, seed)
    }

    /// Draws exactly `count` positions uniformly without replacement from a
    /// ChaCha stream keyed by `seed`.
    pub fn random_with_count(shape: &[usize], count: usize, seed: u64) -> Result<Self, MaskError> {
        let n: usize = shape.iter().product();
        if count > n {
            return Err(MaskError::TooManyActive {
                active: count,
                positions: n,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut active: Vec<u32> = if count == n {
            (0..n as u32).collect()
        } else {
            index::sample(&mut rng, n, count)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        };
        active.sort_unstable();
        Ok(Self::assemble(shape, active, seed))
    }

    pub fn full(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::assemble(shape, (0..n as u32).collect(), 0)
    }

    /// Rebuilds a mask from a stored index list, which must be strictly
    /// increasing and in bounds.
    pub fn from_indices(shape: &[usize], indices: Vec<u32>, seed: u64) -> Result<Self, MaskError> {
        let n: usize = shape.iter().product();
        for (i, pair) in indices.windows(2).enumerate() {
            if pair[0] >= pair[1] {
                return Err(MaskError::Unsorted(i + 1));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= n {
                return Err(MaskError::OutOfBounds {
                    index: last,
                    positions: n,
                });
            }
        }
        Ok(Self::assemble(shape, indices, seed))
    }

    fn assemble(shape: &[usize], active: Vec<u32>, seed: u64) -> Self {
        let n: usize = shape.iter().product();
        let mut bits = vec![false; n];
        for &i in &active {
            bits[i as usize] = true;
        }
        Self {
            shape: shape.to_vec(),
            target_active: active.len(),
            active,
            bits,
            seed,
            update_log: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Sorted flat indices of the active positions.
    pub fn active(&self) -> &[u32] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn target_active(&self) -> usize {
        self.target_active
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.active.len() as f64 / self.bits.len() as f64
    }

    pub fn is_dense(&self) -> bool {
        self.active.len() == self.bits.len()
    }

    pub fn update_log(&self) -> &[UpdateRecord] {
        &self.update_log
    }

    /// Zeroes every inactive position of `values`.
    pub fn apply<T: num_traits::Zero + Copy>(&self, values: &mut [T]) -> Result<(), MaskError> {
        self.check_len(values.len())?;
        for (v, &on) in values.iter_mut().zip(&self.bits) {
            if !on {
                *v = T::zero();
            }
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), MaskError> {
        if len == self.bits.len() {
            Ok(())
        } else {
            Err(MaskError::LengthMismatch {
                expected: self.bits.len(),
                found: len,
            })
        }
    }

    /// Swaps `dropped` out and `grown` in. Both must be disjoint, the first
    /// currently active and the second currently inactive.
    pub(crate) fn swap(&mut self, dropped: &[u32], grown: &[u32], step: u64, shortfall: usize) {
        for &i in dropped {
            debug_assert!(self.bits[i as usize]);
            self.bits[i as usize] = false;
        }
        for &i in grown {
            debug_assert!(!self.bits[i as usize]);
            self.bits[i as usize] = true;
        }
        self.active = self
            .bits
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i as u32))
            .collect();
        self.update_log.push(UpdateRecord {
            step,
            dropped: dropped.len(),
            grown: grown.len(),
            shortfall,
        });
    }

    /// Activates every position.
    pub fn densify(&mut self) {
        if self.is_dense() {
            return;
        }
        self.bits.iter_mut().for_each(|b| *b = true);
        self.active = (0..self.bits.len() as u32).collect();
        self.target_active = self.bits.len();
    }
}
