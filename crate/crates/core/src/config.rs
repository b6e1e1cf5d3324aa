//! Versioned JSON experiment configuration.
//!
//! Unknown keys are rejected everywhere. After the dataset is loaded the
//! configuration is *resolved*: schedule horizons left at 0 are replaced by
//! the run's total step count, and the resolved document is what gets echoed
//! into the output directory.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::schedule::{LambdaSchedule, ScheduleKind};
use crate::sinreq::{LayerRegularizer, RegularizerConfig, DEFAULT_LAMBDA_Q};
use crate::train::{ScheduleSet, TrainConfig, TrainMode, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub lambda_wd: f64,
    /// Base strength for layers without an entry in `lambda_q_per_layer`.
    #[serde(default = "default_lambda_q")]
    pub lambda_q: f64,
    #[serde(default)]
    pub lambda_q_per_layer: IndexMap<String, f64>,
    /// Multiplier on the base strength over steps; constant 1 when absent.
    #[serde(default = "default_schedule")]
    pub schedule: LambdaSchedule,
    #[serde(default)]
    pub schedule_per_layer: IndexMap<String, LambdaSchedule>,
    #[serde(default = "default_true")]
    pub eval_quantize: bool,
    /// Full-precision epochs (no regularizer) run before the main phase.
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_trajectory_count")]
    pub trajectory_count: usize,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
    /// Keep shadow weights inside each layer's level range.
    #[serde(default)]
    pub clip_weights: bool,
}

fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_lambda_q() -> f64 {
    DEFAULT_LAMBDA_Q
}
fn default_schedule() -> LambdaSchedule {
    LambdaSchedule::constant(1.0)
}
fn default_true() -> bool {
    true
}
fn default_trajectory_count() -> usize {
    10
}
fn default_histogram_bins() -> usize {
    60
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.dataset.validate()?;
        let t = &self.train;
        if t.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        for name in t.lambda_q_per_layer.keys().chain(t.schedule_per_layer.keys()) {
            if !self.model.trainable().any(|l| &l.name == name) {
                return Err(Error::Config(format!(
                    "per-layer setting for {name}, which is not a trainable layer"
                )));
            }
        }
        if let Some(l) = self.model.trainable().find(|l| l.quant.is_none()) {
            return Err(Error::Config(format!(
                "trainable layer {} has no quantizer spec",
                l.name
            )));
        }
        Ok(())
    }

    /// Fills zero schedule horizons with the total number of optimizer steps
    /// for `train_len` training samples.
    pub fn resolved(&self, train_len: usize) -> ExperimentConfig {
        let steps_per_epoch = train_len.div_ceil(self.train.batch_size.max(1));
        let total = (self.train.epochs * steps_per_epoch).max(1) as u64;
        let fill = |s: &LambdaSchedule| {
            let mut s = *s;
            if s.horizon == 0 {
                s.horizon = total;
            }
            if s.kind == ScheduleKind::Constant {
                s.end_value = s.start_value;
            }
            s
        };
        let mut out = self.clone();
        out.train.schedule = fill(&self.train.schedule);
        for s in out.train.schedule_per_layer.values_mut() {
            *s = fill(s);
        }
        out
    }

    pub fn train_config(&self, model: &Model) -> Result<TrainConfig> {
        let t = &self.train;
        let per_layer = model
            .geometries()?
            .into_iter()
            .map(|(name, geometry)| {
                let lambda_q = t.lambda_q_per_layer.get(&name).copied().unwrap_or(t.lambda_q);
                (name, LayerRegularizer { lambda_q, geometry })
            })
            .collect();
        let cfg = TrainConfig {
            mode: t.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: t.seed,
            regularizer: RegularizerConfig::new(t.lambda_wd, per_layer)?,
            schedule: ScheduleSet {
                global: t.schedule,
                per_layer: t.schedule_per_layer.clone(),
            },
            eval_quantize: t.eval_quantize,
            trajectory_count: t.trajectory_count,
            clip_weights: t.clip_weights,
        };
        cfg.validate(model)?;
        Ok(cfg)
    }
}
