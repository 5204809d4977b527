use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("sparsity must lie in [0, 1), got {0}")]
    InvalidSparsity(f64),

    #[error("low-rank widening factor must be >= 1, got {0}")]
    InvalidWidening(f64),

    #[error("quantum must be >= 1")]
    InvalidQuantum,

    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),

    #[error("rounded shape {rows}x{cols} gives effective sparsity {effective:.6} outside [0, 1)")]
    InfeasibleRounding {
        rows: u64,
        cols: u64,
        effective: f64,
    },

    #[error("network has no layers")]
    EmptyNetwork,

    #[error("layer {layer}: expected input width {expected}, found {found}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("network has no transformed layer to redistribute sparsity over")]
    NothingToRedistribute,

    #[error(
        "sparsity redistribution infeasible: fixed MACs {fixed} against budget {budget} \
         over sparse capacity {capacity} gives s' = {solved:.6}"
    )]
    InfeasibleRedistribution {
        fixed: u64,
        budget: u64,
        capacity: u64,
        solved: f64,
    },
}
