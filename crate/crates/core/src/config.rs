//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::objective::ObjectiveConfig;
use crate::optim::AdamConfig;
use crate::segnet::NetConfig;

/// Synthetic dataset recipe: `n` samples drawn with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSource),
    /// Directory in the `annotations.jsonl` layout.
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSource {
            n: 5000,
            seed: 1,
            generator: SynthConfig::default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub optimizer: AdamConfig,
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init, shuffling and dropout.
    pub seed: u64,
    pub data: DataSource,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Stop each epoch after this many steps (whole epoch when absent).
    pub max_steps_per_epoch: Option<usize>,
    pub eval_threshold: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            optimizer: AdamConfig::default(),
            objective: ObjectiveConfig::default(),
            batch_size: 16,
            epochs: 15,
            seed: 0,
            data: DataSource::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            max_steps_per_epoch: None,
            eval_threshold: 0.5,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval_threshold {} not in (0, 1)",
                self.eval_threshold
            )));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(Error::Config("max_steps_per_epoch must be positive".into()));
        }
        if let DataSource::Synth(s) = &self.data {
            s.generator.validate()?;
            if s.generator.canvas != self.net.image_size {
                return Err(Error::Config(format!(
                    "synthetic canvas {:?} differs from image_size {:?}",
                    s.generator.canvas, self.net.image_size
                )));
            }
        }
        Ok(())
    }
}
