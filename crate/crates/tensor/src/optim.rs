use std::f64::consts::PI;

use forge_masks::SparseMask;

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// One momentum step on a parameter tensor.
///
/// `d = g + wd·w` (decay only when `decay` is set), `v ← μ·v + d`, then
/// `w ← w − lr·(d + μ·v)` with Nesterov or `w ← w − lr·v` without. When a
/// mask is given, inactive positions are pinned to zero along with their
/// velocity.
pub fn sgd_step<T: Scalar>(
    weights: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    config: &SgdConfig,
    decay: bool,
    mask: Option<&SparseMask>,
) {
    assert_eq!(weights.len(), grads.len(), "sgd_step: gradient length");
    assert_eq!(weights.len(), velocity.len(), "sgd_step: velocity length");
    let lr = T::from_f64(config.lr);
    let mu = T::from_f64(config.momentum);
    let wd = T::from_f64(if decay { config.weight_decay } else { 0.0 });
    let bits = mask.map(|m| {
        assert_eq!(m.len(), weights.len(), "sgd_step: mask length");
        m.bits()
    });
    for i in 0..weights.len() {
        if bits.is_some_and(|b| !b[i]) {
            weights[i] = T::zero();
            velocity[i] = T::zero();
            continue;
        }
        let d = grads[i] + wd * weights[i];
        velocity[i] = mu * velocity[i] + d;
        let step = if config.nesterov {
            d + mu * velocity[i]
        } else {
            velocity[i]
        };
        weights[i] -= lr * step;
    }
}

/// Cosine annealing from `lr_peak` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_peak: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_peak;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + (PI * t).cos())
}
