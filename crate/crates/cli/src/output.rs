//! Run records on disk.
//!
//! `epochs.csv`:  `epoch,lr,batch_size,train_err,test_err,C_bar_K,L_K`
//!
//! `samples.csv`: `epoch,iteration,batch_size,lr,c_k,l_k,nonzero_count`
//!
//! Floats carry 17 significant digits so they parse back to the same bits.
//! Undefined values (`c_k` of a degenerate sample, errors of unevaluated
//! epochs) are empty cells. `summary.json` holds the config echo, the
//! parameter digest, warnings and wall times; it is the only output that
//! varies between identical runs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sgdscope::trainer::TrainReport;

use crate::config::RunConfig;
use crate::CliError;

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const EPOCH_COLUMNS: [&str; 7] = ["epoch", "lr", "batch_size", "train_err", "test_err", "C_bar_K", "L_K"];
pub const SAMPLE_COLUMNS: [&str; 7] = ["epoch", "iteration", "batch_size", "lr", "c_k", "l_k", "nonzero_count"];

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let io = |e: std::io::Error| CliError::Run(format!("writing {}: {e}", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let err = |e: csv::Error| CliError::Run(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Run(format!("csv: {e}")))
}

pub fn epochs_csv(report: &TrainReport) -> Result<Vec<u8>, CliError> {
    csv_bytes(
        &EPOCH_COLUMNS,
        report.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_float(e.lr),
                e.batch_size.to_string(),
                fmt_opt(e.train_error),
                fmt_opt(e.test_error),
                fmt_opt(e.c_bar),
                fmt_float(e.l_cum),
            ]
        }),
    )
}

pub fn samples_csv(report: &TrainReport) -> Result<Vec<u8>, CliError> {
    csv_bytes(
        &SAMPLE_COLUMNS,
        report.samples.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                s.iteration.to_string(),
                s.batch_size.to_string(),
                fmt_float(s.learning_rate),
                fmt_opt(s.c_k),
                fmt_float(s.l_k),
                s.nonzero_count.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub config: &'a RunConfig,
    pub batch_schedule: String,
    pub param_count: usize,
    pub param_digest: &'a str,
    pub initial_train_loss: f64,
    pub final_train_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub final_c_bar: Option<f64>,
    pub final_l_cum: f64,
    pub spectral_samples: usize,
    pub degenerate_samples: usize,
    pub warnings: &'a [String],
    /// Time spent inside the training loop, excluding evaluation.
    pub train_wall_time_s: f64,
    pub total_wall_time_s: f64,
    pub epoch_wall_time_s: Vec<f64>,
}

/// Sum of per-epoch training-loop times.
pub fn train_wall_time(report: &TrainReport) -> f64 {
    report.epochs.iter().map(|e| e.wall_time_s).sum()
}

pub fn summary<'a>(config: &'a RunConfig, batch_label: String, report: &'a TrainReport) -> Summary<'a> {
    let last = report.final_epoch();
    Summary {
        config,
        batch_schedule: batch_label,
        param_count: report.final_params.len(),
        param_digest: &report.param_digest,
        initial_train_loss: report.initial_train_loss,
        final_train_error: last.train_error,
        final_test_error: last.test_error,
        final_c_bar: last.c_bar,
        final_l_cum: last.l_cum,
        spectral_samples: report.samples.len(),
        degenerate_samples: report.degenerate_samples,
        warnings: &report.warnings,
        train_wall_time_s: train_wall_time(report),
        total_wall_time_s: report.wall_time_s,
        epoch_wall_time_s: report.epochs.iter().map(|e| e.wall_time_s).collect(),
    }
}

/// Writes the three run files into `dir`, creating it if needed. Each file
/// is rendered fully in memory before anything touches the disk.
pub fn write_run(dir: &Path, config: &RunConfig, batch_label: String, report: &TrainReport) -> Result<(), CliError> {
    let epochs = epochs_csv(report)?;
    let samples = samples_csv(report)?;
    let summary = serde_json::to_vec_pretty(&summary(config, batch_label, report))
        .map_err(|e| CliError::Run(format!("summary: {e}")))?;
    fs::create_dir_all(dir).map_err(|e| CliError::Run(format!("creating {}: {e}", dir.display())))?;
    write_atomic(&dir.join(EPOCHS_FILE), &epochs)?;
    write_atomic(&dir.join(SAMPLES_FILE), &samples)?;
    write_atomic(&dir.join(SUMMARY_FILE), &summary)
}
