//! Library side of the `sgdscope` command: config parsing, run output,
//! sweeps and the MNIST fetcher.

pub mod config;
pub mod fetch;
pub mod output;
pub mod sweep;

use std::path::Path;

use sgdscope::data::Dataset;
use sgdscope::trainer::{train_on, DatasetSource, TrainConfig, TrainReport};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Unparseable or invalid configuration.
    Config(String),
    /// Dataset missing or malformed.
    Dataset(String),
    /// Anything failing after training started.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Dataset(_) => 3,
            Self::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Dataset(m) => write!(f, "dataset error: {m}"),
            Self::Run(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset, CliError> {
    config.dataset.load().map_err(|e| match &config.dataset {
        DatasetSource::Mnist { dir, .. } => CliError::Dataset(format!("{}: {e}", dir.display())),
        DatasetSource::Synthetic { .. } => CliError::Dataset(e.to_string()),
    })
}

/// Trains on already loaded data. Width or class mismatches between model
/// and data are configuration errors.
pub fn train_loaded(config: &TrainConfig, data: &Dataset) -> Result<TrainReport, CliError> {
    train_on(config, data).map_err(|e| match e {
        sgdscope::Error::Usage(m) => CliError::Config(m),
        other => CliError::Run(other.to_string()),
    })
}

/// The `train` command: resolve, load, train, then write the run files.
/// Nothing is written unless training completes.
pub fn run_train(run: &RunConfig, out: &Path, data_dir: Option<&Path>) -> Result<TrainReport, CliError> {
    let config = run.resolve(data_dir)?;
    let data = load_dataset(&config)?;
    let report = train_loaded(&config, &data)?;
    output::write_run(out, run, config.batch.label(), &report)?;
    Ok(report)
}
