//! The single experiment configuration document: every subsystem's settings
//! under one roof, JSON or TOML on disk, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::NetworkConfig;
use crate::error::{Error, Result};
use crate::evaluation::MatchConfig;
use crate::losses::LossConfig;
use crate::phantom::PhantomConfig;
use crate::pipeline::DetectConfig;
use crate::preprocessing::PreprocessConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Bootstrap resamples for p-values and confidence intervals.
    pub samples: usize,
    pub confidence_level: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { samples: 1000, confidence_level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub phantom: PhantomConfig,
    pub detect: DetectConfig,
    pub matching: MatchConfig,
    pub evaluation: EvalSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        self.phantom.validate()?;
        if self.evaluation.samples == 0 {
            return Err(Error::Config("evaluation.samples: must be positive".into()));
        }
        if !(0.0 < self.evaluation.confidence_level && self.evaluation.confidence_level < 1.0) {
            return Err(Error::Config("evaluation.confidence_level: must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Load from `.json` or `.toml`; the error message names the offending
    /// key path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Echo the fully resolved configuration into a run directory.
    pub fn save_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join("config.resolved.json"))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}
