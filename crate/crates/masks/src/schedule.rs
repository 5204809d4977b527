use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    Static,
    Set,
    #[default]
    Rigl,
}

/// When and how much of a mask is replaced during training.
///
/// The drop fraction follows `alpha/2 · (1 + cos(π·t/T_a))` up to
/// `T_a = anneal_end_fraction · total_steps`; the mask is frozen afterwards.
/// Updates fire at positive multiples of `delta_t` strictly below `T_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    #[serde(default)]
    pub method: MaskMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta_t")]
    pub delta_t: u64,
    #[serde(default = "default_anneal")]
    pub anneal_end_fraction: f64,
    #[serde(default)]
    pub total_steps: u64,
}

fn default_alpha() -> f64 {
    0.3
}

fn default_delta_t() -> u64 {
    100
}

fn default_anneal() -> f64 {
    0.75
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            method: MaskMethod::default(),
            alpha: default_alpha(),
            delta_t: default_delta_t(),
            anneal_end_fraction: default_anneal(),
            total_steps: 0,
        }
    }
}

impl MaskSchedule {
    pub fn new(method: MaskMethod, total_steps: u64) -> Self {
        Self {
            method,
            total_steps,
            ..Self::default()
        }
    }

    /// Returns the name of the first field violating its range.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha".into());
        }
        if self.delta_t == 0 {
            return Err("delta_t".into());
        }
        if !(self.anneal_end_fraction > 0.0 && self.anneal_end_fraction <= 1.0) {
            return Err("anneal_end_fraction".into());
        }
        Ok(())
    }

    pub fn anneal_end(&self) -> f64 {
        self.anneal_end_fraction * self.total_steps as f64
    }

    pub fn drop_fraction(&self, step: u64) -> f64 {
        let end = self.anneal_end();
        if self.method == MaskMethod::Static || step as f64 >= end {
            return 0.0;
        }
        let t = step as f64 / end;
        0.5 * self.alpha * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn is_update_step(&self, step: u64) -> bool {
        self.method != MaskMethod::Static
            && step > 0
            && step.is_multiple_of(self.delta_t)
            && (step as f64) < self.anneal_end()
    }

    pub fn update_steps(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.total_steps).filter(|&s| self.is_update_step(s))
    }
}
