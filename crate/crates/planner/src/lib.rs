//! Iso-FLOP planning for sparse layer transformations.
//!
//! A dense layer `z -> θᵀz` can be swapped for a wider, branched, factorized
//! or low-rank-plus-sparse layer whose unstructured sparsity is chosen so the
//! multiply-accumulate count stays equal to the original. This crate derives
//! those replacements in closed form, rounds them to integer shapes, re-solves
//! the sparsity after rounding and audits the result.
//!
//! All MAC counts are per batch element unless a `batch` argument is taken.
//! One multiply-accumulate is one MAC; bias additions are never counted.

mod audit;
mod error;
mod layer;
mod network;
mod transform;

pub use audit::{verify_isoflop, IsoFlopReport, DEFAULT_TOLERANCE};
pub use error::PlanError;
pub use layer::{flop_count, LayerKind, LayerRole, LayerSpec};
pub use network::{plan_network, redistribute_sparsity, NetworkPlan, PlanOptions, PlannedLayer};
pub use transform::{
    cardinality, plan_dense, plan_low_rank_dense, plan_sparse_doped, plan_sparse_factorized,
    plan_sparse_parallel, plan_sparse_wide, round_to_quantum, split_active, unrounded_cardinality,
    widening_factor, Nonlinearity, Transform, TransformPlan, WeightPlan, WeightRole,
};

pub type Result<T, E = PlanError> = std::result::Result<T, E>;
