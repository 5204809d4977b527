use serde::{Deserialize, Serialize};

use crate::layer::LayerSpec;
use crate::transform::TransformPlan;

pub const DEFAULT_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopReport {
    pub dense_macs: u64,
    pub plan_macs: u64,
    pub relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub dense_weights: u64,
    pub active_weights: u64,
}

/// Compares a plan's per-example MACs against the dense layer it replaces.
pub fn verify_isoflop(plan: &TransformPlan, spec: &LayerSpec, tolerance: f64) -> IsoFlopReport {
    let dense_macs = spec.dense_macs();
    let plan_macs = plan.predicted_macs;
    let relative_error = plan_macs.abs_diff(dense_macs) as f64 / dense_macs.max(1) as f64;
    IsoFlopReport {
        dense_macs,
        plan_macs,
        relative_error,
        tolerance,
        pass: relative_error <= tolerance,
        dense_weights: spec.weight_positions(),
        active_weights: plan.active_weights,
    }
}
