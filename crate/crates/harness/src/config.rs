//! Run configuration, read from and written to JSON with these exact field names.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cstf_core::codec::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Precision-recall integration rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interp {
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.
    #[serde(rename = "11pt")]
    ElevenPoint,
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    #[serde(rename = "all")]
    AllPoints,
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::ElevenPoint => "11pt",
            Interp::AllPoints => "all",
        })
    }
}

impl FromStr for Interp {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11pt" => Ok(Interp::ElevenPoint),
            "all" => Ok(Interp::AllPoints),
            other => Err(HarnessError::Config(format!("unknown interpolation `{other}` (11pt|all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Scenes averaged per SGD step.
    pub batch_size: usize,
    /// Stop once the training-set loss falls below this value.
    pub target_loss: Option<f64>,
    /// Rescale the whole gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    /// Defaults of the matching-loss run, whose logits are scaled by `1/τ`.
    pub fn matching() -> Self {
        Self { steps: 1000, clip_norm: Some(1.0), ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::Config("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(HarnessError::Config("gradient clip norm must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("steps and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 2000,
            batch_size: 1,
            target_loss: None,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub iou_threshold: f64,
    pub interpolation: Interp,
    /// Foreground probability above which a pixel joins a detection.
    pub score_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interp::AllPoints,
            score_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
    /// Expected objects per scene.
    pub density: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 8,
            test_images: 8,
            density: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Optimizer of the matching-loss run.
    pub match_optimizer: OptimizerConfig,
    pub metric: MetricConfig,
    pub data: DataConfig,
    /// Element width of the run, 32 or 64.
    pub precision: u32,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            match_optimizer: OptimizerConfig::matching(),
            metric: MetricConfig::default(),
            data: DataConfig::default(),
            precision: 64,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.match_optimizer.validate()?;
        if ![0.5, 0.7].contains(&self.metric.iou_threshold) {
            return Err(HarnessError::Config(format!(
                "IoU threshold must be 0.5 or 0.7, got {}",
                self.metric.iou_threshold
            )));
        }
        if ![32, 64].contains(&self.precision) {
            return Err(HarnessError::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if self.model.height != self.model.width {
            return Err(HarnessError::Config("synthetic scenes are square; height must equal width".into()));
        }
        if self.data.train_images == 0 {
            return Err(HarnessError::Config("need at least one training image".into()));
        }
        Ok(())
    }
}
