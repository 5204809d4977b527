use forge_masks::MaskError;
use forge_planner::PlanError;
use forge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("inconsistent plan at layer {layer}: {reason}")]
    Inconsistent { layer: usize, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {expected:?}, got {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input shape {found:?} does not match expected [batch, {expected:?}]")]
    Input {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
