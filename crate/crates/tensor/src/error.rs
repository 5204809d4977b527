use forge_masks::MaskError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch normalization needs batch >= 2 in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("malformed compressed rows: {0}")]
    MalformedCsr(String),

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error(transparent)]
    Mask(#[from] MaskError),
}
