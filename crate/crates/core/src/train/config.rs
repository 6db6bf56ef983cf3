//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelSpec, Pipeline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-5,
        }
    }
}

/// Network shape: one halving block per entry of `channels`, then a block to
/// the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub kernel_components: usize,
    pub pipeline: Pipeline,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![8],
            kernel_components: 5,
            pipeline: Pipeline::default(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, dims: usize, input_components: usize, classes: usize) -> ModelSpec {
        let mut s = ModelSpec::halving(dims, input_components, &self.channels, classes, self.kernel_components);
        s.pipeline = self.pipeline;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Toy {
        #[serde(default = "toy_train")]
        train: usize,
        #[serde(default = "toy_test")]
        test: usize,
    },
    Mnist {
        /// Directory with the four IDX files.
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
        #[serde(default = "mnist_components")]
        components: usize,
    },
    /// Pre-fitted mixtures in the binary mixture format with labels as JSON
    /// arrays.
    Mixtures {
        train: PathBuf,
        train_labels: PathBuf,
        test: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

fn toy_train() -> usize {
    600
}

fn toy_test() -> usize {
    300
}

fn mnist_components() -> usize {
    16
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy {
            train: toy_train(),
            test: toy_test(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight decay coefficient as a fraction of the current learning rate.
    pub weight_decay_scale: f64,
    pub scheduler: SchedulerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Sample positions per channel for the per-layer fitting RMSE; 0 skips it.
    pub rmse_points: usize,
    /// Worker threads; 0 picks the core count and 1 is fully deterministic.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay_scale: 0.1,
            scheduler: SchedulerConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            rmse_points: 1000,
            threads: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) {
            return Err(Error::InvalidArgument("scheduler factor must lie in (0, 1]".into()));
        }
        if !(self.weight_decay_scale >= 0.0) {
            return Err(Error::InvalidArgument("weight decay scale must be non-negative".into()));
        }
        if self.model.channels.iter().any(|&c| c == 0) || self.model.kernel_components == 0 {
            return Err(Error::InvalidArgument("channel and kernel counts must be positive".into()));
        }
        Ok(())
    }
}
