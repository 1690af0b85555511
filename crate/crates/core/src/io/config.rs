//! The JSON run configuration: `model`, `trainer`, `schedule`, `sampling`.
//! Unknown keys anywhere are rejected so typos surface immediately.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::train::TrainerConfig;
use crate::unet::ModelConfig;

fn default_count() -> usize {
    16
}

fn default_true() -> bool {
    true
}

/// Defaults for `sample`; command-line flags override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    /// Reverse steps; `None` runs the full schedule.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Capture every `traj_stride`-th state; 0 disables capture.
    #[serde(default)]
    pub traj_stride: usize,
    #[serde(default = "default_true")]
    pub use_ema: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            count: default_count(),
            steps: None,
            seed: 0,
            traj_stride: 0,
            use_ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            trainer: TrainerConfig::default(),
            schedule: ScheduleConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::from_json(text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Checks every section, listing all violations.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(v)) = self.model.validate() {
            errs.extend(v.into_iter().map(|e| format!("model: {e}")));
        }
        errs.extend(self.trainer.violations().into_iter().map(|e| format!("trainer: {e}")));
        if let Err(e) = self.schedule.build() {
            errs.push(format!("schedule: {e}"));
        }
        if self.sampling.count == 0 {
            errs.push("sampling: count must be positive".into());
        }
        if let Some(k) = self.sampling.steps {
            if k == 0 || k > self.schedule.timesteps {
                errs.push(format!("sampling: steps {k} outside 1..={}", self.schedule.timesteps));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
