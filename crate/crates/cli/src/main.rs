use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgdscope::oracle::selfcheck;
use sgdscope_cli::config::{RunConfig, DATA_DIR_ENV};
use sgdscope_cli::fetch::{fetch_mnist, DEFAULT_BASE_URL};
use sgdscope_cli::sweep::{expand, run_jobs, GridConfig};
use sgdscope_cli::{run_train, CliError};

/// Train small classifiers with SGD and track per-sample gradient spectra.
#[derive(Parser)]
#[command(name = "sgdscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write epochs.csv, samples.csv and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// MNIST directory; overrides the config file and the environment.
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
    },
    /// Train every (batch, lr, seed) combination of a grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
    },
    /// Run the oracle suite and report each check.
    Selfcheck,
    /// Download MNIST and verify the file sizes.
    FetchMnist {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_BASE_URL)]
        base_url: String,
    },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("sgdscope: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, data_dir } => {
            let run = match RunConfig::from_file(&config) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match run_train(&run, &out, data_dir.as_deref()) {
                Ok(report) => {
                    let last = report.final_epoch();
                    println!(
                        "{} epochs, test error {}, C_bar_K {}, L_K {:e}",
                        report.epochs.len(),
                        last.test_error.map_or("-".into(), |v| format!("{v:.2}%")),
                        last.c_bar.map_or("-".into(), |v| format!("{v:.4e}")),
                        last.l_cum
                    );
                    for w in &report.warnings {
                        eprintln!("warning: {w}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { grid, seeds, parallel, out, data_dir } => {
            let jobs = match GridConfig::from_file(&grid).and_then(|g| expand(&g, seeds, data_dir.as_deref())) {
                Ok(j) => j,
                Err(e) => return fail(e),
            };
            match run_jobs(&jobs, parallel, &out) {
                Ok(outcome) => {
                    for (run, e) in &outcome.failures {
                        eprintln!("failed: {run}: {e}");
                    }
                    println!("{} runs, {} failed", jobs.len(), outcome.failures.len());
                    if outcome.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all();
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::FetchMnist { out, base_url } => match fetch_mnist(&base_url, &out) {
            Ok(()) => {
                println!("MNIST written to {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
