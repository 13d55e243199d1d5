//! Declarative experiment configuration, stored as TOML. One file fully
//! determines a run: corpus, degradations, loss scales, optimizer budget,
//! and evaluation grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::DegradationPreset;
use crate::losses::LossWeights;
use crate::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
pub struct CorpusSizes {
    pub train: usize,
    pub test: usize,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Debug)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
}

#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
pub struct PresetPair {
    pub lq: DegradationPreset,
    pub elq: DegradationPreset,
}

#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
pub struct ExperimentConfig {
    pub run_seed: u64,
    pub image_size: usize,
    pub prompt_dropout_p: f64,
    pub lfo_iters: Vec<usize>,
    pub corpus: CorpusSizes,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub presets: PresetPair,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_seed: 7,
            image_size: 64,
            prompt_dropout_p: 0.3,
            lfo_iters: vec![0, 1, 2],
            corpus: CorpusSizes { train: 200, test: 64 },
            optimizer: OptimizerConfig { learning_rate: 1e-3, steps: 1200, batch: 1 },
            loss: LossWeights::default(),
            presets: PresetPair {
                lq: DegradationPreset::lq_default(),
                elq: DegradationPreset::elq_default(),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.corpus.train == 0 || self.corpus.test == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.optimizer.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout_p) {
            return Err(Error::Config("prompt_dropout_p must be in [0, 1]".into()));
        }
        self.loss.validate()?;
        self.presets.lq.validate()?;
        self.presets.elq.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
