//! Experiment driver for iso-FLOP sparse networks.
//!
//! A run plans the configured dense network under one transformation, builds
//! it, trains it with dynamic or static masks under a cosine learning rate,
//! checkpoints every epoch and writes a metrics CSV, a JSON summary with the
//! per-layer MAC and cardinality audit, and a loss-vs-MACs chart.
//!
//! Output directory layout:
//!
//! | file | contents |
//! |---|---|
//! | `metrics.csv` | `step,loss,lr,macs` per optimizer step |
//! | `summary.json` | [`RunReport`] |
//! | `loss_vs_macs.svg` | training loss against cumulative forward MACs |
//! | `checkpoint.sift` | parameters, masks and norm statistics of the last epoch |

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Record};
pub use config::{load_config, FineTune, MaskConfig, OptimizerConfig, Seeds, TrainConfig};
pub use data::{
    generate_idx_task, load_dataset, read_idx, write_idx, DatasetDescriptor, Split, Targets,
};
pub use error::TrainError;
pub use report::{audit, AuditRow};
pub use train::{evaluate, evaluate_checkpoint, plan_from_config, train, Metrics, RunReport};

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
