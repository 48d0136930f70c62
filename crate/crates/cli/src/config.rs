use std::path::Path;

use anyhow::Context;
use ibfp::dataset::{DatasetConfig, SpliceBenchConfig};
use ibfp::localization::LocalizeConfig;
use ibfp::model::ModelConfig;
use ibfp::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 1e-4, 1e-3, 1e-2],
        }
    }
}

/// Everything a run depends on; written back next to each run's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub splices: SpliceBenchConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub localize: LocalizeConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())).into())
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.splices.seed = seed;
        self.training.seed = seed;
        self.localize.em.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: ibfp::Error| CliError::InvalidConfig(e.to_string());
        self.dataset.validate().map_err(bad)?;
        self.model.validate().map_err(bad)?;
        self.training.validate().map_err(bad)?;
        self.localize.em.validate().map_err(bad)?;
        if self.splices.cases == 0 {
            return Err(CliError::InvalidConfig("splices.cases must be positive".into()));
        }
        self.splices.splice.validate().map_err(bad)?;
        if let Some(s) = self.localize.stride {
            if s == 0 {
                return Err(CliError::InvalidConfig("localize.stride must be positive".into()));
            }
        }
        if let Some(b) = self.sweep.betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(CliError::InvalidConfig(format!("sweep betas must be finite and nonnegative, got {b}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
