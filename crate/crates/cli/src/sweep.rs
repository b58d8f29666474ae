//! Grid sweeps over batch schedules × learning rates × seeds.
//!
//! Grid file:
//!
//! ```json
//! {
//!   "base": { "model": [784, 64, 64, 10], "total_epochs": 10, "dataset": { "kind": "mnist" } },
//!   "batch": ["s16", "s64", "s16-to-256"],
//!   "lr": ["lr0.025", 0.1]
//! }
//! ```
//!
//! Seed `i` of a cell uses `base.seed + i`. Each run writes into
//! `<out>/runs/<batch>_lr<lr>_seed<seed>/`; `<out>/aggregate.csv` has one row
//! per cell, sorted by batch sizes then learning rate.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{Map, Value};
use sgdscope::data::Dataset;
use sgdscope::trainer::{DatasetSource, TrainConfig};

use crate::config::RunConfig;
use crate::output::{fmt_float, write_atomic, write_run};
use crate::{load_dataset, train_loaded, CliError};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const AGGREGATE_COLUMNS: [&str; 9] = [
    "batch_schedule",
    "batch_size",
    "lr",
    "runs",
    "failed",
    "test_err_mean",
    "test_err_std",
    "C_bar_K_mean",
    "L_K_mean",
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: Map<String, Value>,
    pub batch: Vec<Value>,
    pub lr: Vec<Value>,
}

impl GridConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())))
    }
}

/// One (batch, lr, seed) run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub cell: usize,
    pub run: RunConfig,
    pub config: TrainConfig,
    pub dir_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub final_test_error: Option<f64>,
    pub final_c_bar: Option<f64>,
    pub final_l_cum: f64,
    pub train_wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub batch_label: String,
    pub batch_sizes: Vec<usize>,
    pub lr: f64,
    pub runs: usize,
    pub failed: usize,
    pub test_err_mean: Option<f64>,
    /// Sample standard deviation; undefined below two successful runs.
    pub test_err_std: Option<f64>,
    pub c_bar_mean: Option<f64>,
    pub l_cum_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellSummary>,
    /// `(run directory name, error)` for every failed run.
    pub failures: Vec<(String, String)>,
}

/// Expands and validates every run of the grid before anything executes.
pub fn expand(grid: &GridConfig, seeds: usize, data_dir: Option<&Path>) -> Result<Vec<SweepJob>, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    if grid.batch.is_empty() || grid.lr.is_empty() {
        return Err(CliError::Config("grid needs at least one batch and one lr entry".into()));
    }
    let base_seed = match grid.base.get("seed") {
        None => 0,
        Some(v) => v.as_u64().ok_or_else(|| CliError::Config("field `base.seed`: expected an integer".into()))?,
    };
    let mut jobs = Vec::new();
    for (bi, batch) in grid.batch.iter().enumerate() {
        for (li, lr) in grid.lr.iter().enumerate() {
            for s in 0..seeds as u64 {
                let mut obj = grid.base.clone();
                obj.insert("batch".into(), batch.clone());
                obj.insert("lr".into(), lr.clone());
                obj.insert("seed".into(), Value::from(base_seed + s));
                let run: RunConfig = serde_json::from_value(Value::Object(obj))
                    .map_err(|e| CliError::Config(format!("grid cell (batch {batch}, lr {lr}): {e}")))?;
                let config = run.resolve(data_dir).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("grid cell (batch {batch}, lr {lr}): {m}")),
                    other => other,
                })?;
                let dir_name = format!("{}_lr{}_seed{}", config.batch.label(), config.lr.initial_lr, base_seed + s);
                jobs.push(SweepJob { cell: bi * grid.lr.len() + li, run, config, dir_name });
            }
        }
    }
    Ok(jobs)
}

fn load_all(jobs: &[SweepJob]) -> Result<Vec<(DatasetSource, Dataset)>, CliError> {
    let mut cache: Vec<(DatasetSource, Dataset)> = Vec::new();
    for job in jobs {
        if !cache.iter().any(|(s, _)| *s == job.config.dataset) {
            cache.push((job.config.dataset.clone(), load_dataset(&job.config)?));
        }
    }
    Ok(cache)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Runs every job on a pool of `parallel` workers and writes per-run files
/// plus the aggregate. Failed runs are recorded and the sweep continues.
pub fn run_jobs(jobs: &[SweepJob], parallel: usize, out: &Path) -> Result<SweepOutcome, CliError> {
    if parallel == 0 {
        return Err(CliError::Config("--parallel must be >= 1".into()));
    }
    let datasets = load_all(jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    let runs_dir = out.join("runs");
    let results: Vec<Result<RunResult, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let data = &datasets.iter().find(|(s, _)| *s == job.config.dataset).expect("loaded").1;
                let report = train_loaded(&job.config, data).map_err(|e| e.to_string())?;
                let dir: PathBuf = runs_dir.join(&job.dir_name);
                write_run(&dir, &job.run, job.config.batch.label(), &report).map_err(|e| e.to_string())?;
                let last = report.final_epoch();
                Ok(RunResult {
                    final_test_error: last.test_error,
                    final_c_bar: last.c_bar,
                    final_l_cum: last.l_cum,
                    train_wall_time_s: crate::output::train_wall_time(&report),
                })
            })
            .collect()
    });
    let outcome = summarize(jobs, &results);
    write_aggregate(out, &outcome)?;
    Ok(outcome)
}

/// Groups run results by cell and orders cells by (batch sizes, lr).
pub fn summarize(jobs: &[SweepJob], results: &[Result<RunResult, String>]) -> SweepOutcome {
    let mut cells: Vec<(usize, CellSummary)> = Vec::new();
    let mut failures = Vec::new();
    let cell_ids: std::collections::BTreeSet<usize> = jobs.iter().map(|j| j.cell).collect();
    for id in cell_ids {
        let members: Vec<(&SweepJob, &Result<RunResult, String>)> =
            jobs.iter().zip(results).filter(|(j, _)| j.cell == id).collect();
        let first = members[0].0;
        let ok: Vec<&RunResult> = members.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        for (j, r) in &members {
            if let Err(e) = r {
                failures.push((j.dir_name.clone(), e.clone()));
            }
        }
        let errs: Vec<f64> = ok.iter().filter_map(|r| r.final_test_error).collect();
        let cs: Vec<f64> = ok.iter().filter_map(|r| r.final_c_bar).collect();
        let ls: Vec<f64> = ok.iter().map(|r| r.final_l_cum).collect();
        cells.push((
            id,
            CellSummary {
                batch_label: first.config.batch.label(),
                batch_sizes: first.config.batch.sizes.clone(),
                lr: first.config.lr.initial_lr,
                runs: members.len(),
                failed: members.len() - ok.len(),
                test_err_mean: mean(&errs),
                test_err_std: sample_std(&errs),
                c_bar_mean: mean(&cs),
                l_cum_mean: mean(&ls),
            },
        ));
    }
    cells.sort_by(|(ia, a), (ib, b)| {
        a.batch_sizes
            .cmp(&b.batch_sizes)
            .then_with(|| a.batch_label.cmp(&b.batch_label))
            .then_with(|| a.lr.total_cmp(&b.lr))
            .then_with(|| ia.cmp(ib))
    });
    SweepOutcome { cells: cells.into_iter().map(|(_, c)| c).collect(), failures }
}

fn write_aggregate(out: &Path, outcome: &SweepOutcome) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Run(format!("csv: {e}"));
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AGGREGATE_COLUMNS).map_err(err)?;
    for c in &outcome.cells {
        w.write_record([
            c.batch_label.clone(),
            c.batch_sizes[0].to_string(),
            fmt_float(c.lr),
            c.runs.to_string(),
            c.failed.to_string(),
            opt(c.test_err_mean),
            opt(c.test_err_std),
            opt(c.c_bar_mean),
            opt(c.l_cum_mean),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Run(format!("csv: {e}")))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Run(format!("creating {}: {e}", out.display())))?;
    write_atomic(&out.join(AGGREGATE_FILE), &bytes)?;
    if !outcome.failures.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "error"]).map_err(err)?;
        for (run, e) in &outcome.failures {
            w.write_record([run, e]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Run(format!("csv: {e}")))?;
        write_atomic(&out.join(FAILURES_FILE), &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_is_sample_std() {
        assert_eq!(sample_std(&[1.0]), None);
        assert!((sample_std(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean(&[]), None);
    }
}
