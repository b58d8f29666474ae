//! JSON run configuration.
//!
//! A config is a flat object:
//!
//! ```json
//! {
//!   "model": [784, 64, 64, 10],
//!   "lr": "lr0.1",
//!   "batch": "s32-to-128-MS",
//!   "total_epochs": 40,
//!   "seed": 1,
//!   "dataset": { "kind": "mnist", "train_limit": 10000 }
//! }
//! ```
//!
//! `lr` and `batch` take either shorthand strings or plain numbers. The
//! optional fields default to momentum 0.9, decay at 50% and 75% by 0.1,
//! a spectral sample every 50 mini-batches, seed 0 and per-epoch evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdscope::fisher::SpectralOptions;
use sgdscope::model::MlpSpec;
use sgdscope::schedule::{parse_lr, BatchSchedule, LrSchedule};
use sgdscope::trainer::{DatasetSource, TrainConfig, DEFAULT_MEASURE_INTERVAL, DEFAULT_MOMENTUM};

use crate::CliError;

/// Environment variable naming the MNIST directory when neither the config
/// nor a flag does.
pub const DATA_DIR_ENV: &str = "SGDSCOPE_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumberOrName<T> {
    Number(T),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dims: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    },
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Vec<usize>,
    pub lr: NumberOrName<f64>,
    pub batch: NumberOrName<usize>,
    #[serde(alias = "epochs")]
    pub total_epochs: usize,
    pub dataset: DatasetConfig,
    #[serde(default = "default_decay_points")]
    pub decay_points: Vec<f64>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_measure_interval")]
    pub measure_interval: usize,
    /// Seeds both the weight initialisation and the shuffles.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonzero_rel_tol: Option<f64>,
}

fn default_decay_points() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_measure_interval() -> usize {
    DEFAULT_MEASURE_INTERVAL
}

fn default_true() -> bool {
    true
}

fn field_err(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {e}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn learning_rate(&self) -> Result<f64, CliError> {
        match &self.lr {
            NumberOrName::Number(v) => Ok(*v),
            NumberOrName::Name(s) => parse_lr(s).map_err(|e| field_err("lr", e)),
        }
    }

    pub fn batch_schedule(&self) -> Result<BatchSchedule, CliError> {
        let r = match &self.batch {
            NumberOrName::Number(v) => BatchSchedule::fixed(*v, self.total_epochs),
            NumberOrName::Name(s) => BatchSchedule::from_shorthand(s, self.total_epochs),
        };
        r.map_err(|e| field_err("batch", e))
    }

    /// Builds a validated training configuration. `data_dir` overrides the
    /// MNIST directory from the config file and the environment.
    pub fn resolve(&self, data_dir: Option<&Path>) -> Result<TrainConfig, CliError> {
        let model = MlpSpec::new(self.model.clone(), self.seed).map_err(|e| field_err("model", e))?;
        let lr =
            LrSchedule::new(self.learning_rate()?, self.total_epochs, self.decay_points.clone(), self.decay_factor)
                .map_err(|e| field_err("lr", e))?;
        let batch = self.batch_schedule()?;
        let dataset = match &self.dataset {
            DatasetConfig::Synthetic { classes, dims, per_class, spread, seed } => DatasetSource::Synthetic {
                classes: *classes,
                dims: *dims,
                per_class: *per_class,
                spread: *spread,
                seed: *seed,
            },
            DatasetConfig::Mnist { dir, train_limit, test_limit } => {
                let dir = data_dir
                    .map(Path::to_path_buf)
                    .or_else(|| dir.clone())
                    .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        field_err("dataset.dir", format!("no MNIST directory given and {DATA_DIR_ENV} is unset"))
                    })?;
                DatasetSource::Mnist { dir, train_limit: *train_limit, test_limit: *test_limit }
            }
        };
        let mut spectral = SpectralOptions::default();
        if let Some(t) = self.nonzero_rel_tol {
            if !(t > 0.0 && t < 1.0) {
                return Err(field_err("nonzero_rel_tol", format!("must be in (0, 1), got {t}")));
            }
            spectral.nonzero_rel_tol = t;
        }
        let config = TrainConfig {
            model,
            lr,
            batch,
            momentum: self.momentum,
            total_epochs: self.total_epochs,
            measure_interval: self.measure_interval,
            seed: self.seed,
            dataset,
            eval_each_epoch: self.eval_each_epoch,
            spectral,
        };
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field_err("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if self.measure_interval == 0 {
            return Err(field_err("measure_interval", "must be >= 1"));
        }
        if self.total_epochs == 0 {
            return Err(field_err("total_epochs", "must be >= 1"));
        }
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}
