use std::path::{Path, PathBuf};

use forge_masks::{MaskMethod, MaskSchedule};
use forge_planner::{LayerRole, LayerSpec, Nonlinearity, PlanOptions, Transform};
use serde::{Deserialize, Serialize};

use crate::data::DatasetDescriptor;
use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTune {
    #[default]
    None,
    /// Masks stay fixed for the whole run.
    Sparse,
    /// Every mask is fully activated before the first step.
    Densify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default)]
    pub method: MaskMethod,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::delta_t")]
    pub delta_t: u64,
    #[serde(default = "defaults::anneal")]
    pub anneal_end_fraction: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            method: MaskMethod::default(),
            alpha: defaults::alpha(),
            delta_t: defaults::delta_t(),
            anneal_end_fraction: defaults::anneal(),
        }
    }
}

impl MaskConfig {
    pub fn schedule(&self, total_steps: u64) -> MaskSchedule {
        MaskSchedule {
            method: self.method,
            alpha: self.alpha,
            delta_t: self.delta_t,
            anneal_end_fraction: self.anneal_end_fraction,
            total_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr_peak")]
    pub lr_peak: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::yes")]
    pub nesterov: bool,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_peak: defaults::lr_peak(),
            lr_min: 0.0,
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            nesterov: true,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub mask: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dense layer chain. First and last layers are marked as boundary
    /// layers by position.
    pub layers: Vec<LayerSpec>,
    #[serde(default = "defaults::transform")]
    pub transform: Transform,
    #[serde(default)]
    pub sparsity: f64,
    #[serde(default = "defaults::quantum")]
    pub quantum: usize,
    #[serde(default = "defaults::yes")]
    pub keep_boundary_dense: bool,
    /// Re-solve one uniform sparsity so the whole network meets the dense
    /// MAC budget again.
    #[serde(default)]
    pub redistribute: bool,
    /// Inside branched and factorized transforms.
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    /// After every layer but the last.
    #[serde(default)]
    pub hidden_activation: Nonlinearity,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetDescriptor,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub fine_tune: FineTune,
    /// Parameters and masks to start from.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Write the optional loss-vs-MACs chart.
    #[serde(default = "defaults::yes")]
    pub svg: bool,
}

mod defaults {
    use forge_planner::Transform;

    pub fn alpha() -> f64 {
        0.3
    }
    pub fn delta_t() -> u64 {
        100
    }
    pub fn anneal() -> f64 {
        0.75
    }
    pub fn lr_peak() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn epochs() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn transform() -> Transform {
        Transform::Dense
    }
    pub fn quantum() -> usize {
        1
    }
}

impl TrainConfig {
    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            transform: self.transform,
            sparsity: self.sparsity,
            quantum: self.quantum,
            keep_boundary_dense: self.keep_boundary_dense,
            nonlinearity: self.nonlinearity,
        }
    }

    /// Layer specs with boundary roles assigned by position.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let role = match i {
                    0 => LayerRole::BoundaryFirst,
                    i if i == last => LayerRole::BoundaryLast,
                    _ => LayerRole::Interior,
                };
                l.clone().with_role(role)
            })
            .collect()
    }

    /// Resolves relative paths against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        self.dataset.resolve_paths(base);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(TrainError::invalid(field, reason));
        if self.layers.is_empty() {
            return bad("layers", "at least one layer is required".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| TrainError::invalid(format!("layers[{i}]"), e.to_string()))?;
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(
                "sparsity",
                format!("must lie in [0, 1), got {}", self.sparsity),
            );
        }
        if self.quantum == 0 {
            return bad("quantum", "must be >= 1".into());
        }
        let m = &self.mask;
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return bad("mask.alpha", format!("must lie in (0, 1), got {}", m.alpha));
        }
        if m.delta_t == 0 {
            return bad("mask.delta_t", "must be >= 1".into());
        }
        if !(m.anneal_end_fraction > 0.0 && m.anneal_end_fraction <= 1.0) {
            return bad(
                "mask.anneal_end_fraction",
                format!("must lie in (0, 1], got {}", m.anneal_end_fraction),
            );
        }
        let o = &self.optimizer;
        if !(o.lr_peak > 0.0 && o.lr_peak.is_finite()) {
            return bad(
                "optimizer.lr_peak",
                format!("must be positive, got {}", o.lr_peak),
            );
        }
        if !(o.lr_min >= 0.0 && o.lr_min <= o.lr_peak) {
            return bad(
                "optimizer.lr_min",
                format!("must lie in [0, lr_peak], got {}", o.lr_min),
            );
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(
                "optimizer.momentum",
                format!("must lie in [0, 1), got {}", o.momentum),
            );
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(
                "optimizer.weight_decay",
                format!("must be non-negative, got {}", o.weight_decay),
            );
        }
        if o.epochs == 0 {
            return bad("optimizer.epochs", "must be >= 1".into());
        }
        if o.batch_size < 2 {
            return bad(
                "optimizer.batch_size",
                format!("must be >= 2, got {}", o.batch_size),
            );
        }
        self.dataset.validate()?;
        if let Some(p) = &self.init_checkpoint {
            if !p.is_file() {
                return bad("init_checkpoint", format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

/// Reads, resolves and validates a JSON config. Unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        TrainError::invalid("config", format!("cannot read {}: {e}", path.display()))
    })?;
    let mut cfg = parse_json::<TrainConfig>(path, &text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| TrainError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
