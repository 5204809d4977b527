//! Executable networks built from a [`forge_planner::NetworkPlan`].
//!
//! Each planned layer becomes one of the iso-FLOP topologies:
//!
//! | transform          | forward                                   |
//! |--------------------|-------------------------------------------|
//! | dense, sparse wide | `θᵀz`                                     |
//! | sparse parallel    | `Σⱼ σ(θⱼᵀz)`                              |
//! | sparse factorized  | `Vᵀσ(Uᵀz)`                                |
//! | sparse doped       | `Vᵀ(Uᵀz) + σ(θᵀz)`                        |
//! | low-rank dense     | `Vᵀ(Uᵀz)`                                 |
//!
//! followed by one dense bias and, on every layer but the last, the hidden
//! activation. Parameters live in a flat registry named
//! `layer{i}.{segment}.{weight|bias|bn.*}`.

mod error;
mod network;

pub use error::NetworkError;
pub use network::{
    build, single_layer_plan, BuildOptions, ExecPath, ForwardPass, MaskUpdate, Network, NormState,
    Param, ParamKind,
};

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;
