use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::model::ModelSpec;
use crate::rebnn::{GammaMode, TrainConfig};
use crate::{Error, Result};

/// Experiment file (JSON). Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Epochs between latent-weight histogram snapshots (0 disables).
    #[serde(default = "default_histogram_every")]
    pub histogram_every: usize,
    /// Modes compared by `ablate-gamma`.
    #[serde(default = "default_modes")]
    pub ablation_modes: Vec<GammaMode>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_histogram_every() -> usize {
    1
}

fn default_modes() -> Vec<GammaMode> {
    vec![
        GammaMode::Adaptive,
        GammaMode::Constant(1e-4),
        GammaMode::MaxGradOnly,
        GammaMode::Off,
    ]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        if cfg.ablation_modes.is_empty() {
            return Err(Error::Config("ablation_modes is empty".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
