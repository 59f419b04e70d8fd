//! Command-line front end: configuration, experiment commands and their
//! output files.

pub mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use immrm::selfcheck;
use immrm::sim::{self, ExperimentConfig, RunMetrics, SweepRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ECHO_FILE: &str = "effective_config.toml";

/// Process exit statuses.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(#[from] immrm::Error),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("self-check failed")]
    SelfCheck,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Runtime(_) | CliError::SelfCheck => exit::RUNTIME,
            CliError::Io { .. } => exit::IO,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "immrm",
    version,
    about = "IMM filters with inverse-Wishart measurement-noise estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo comparison at one noise level; writes metrics.csv.
    Run(ExperimentArgs),
    /// Monte Carlo comparison over experiment.r_sweep; writes sweep.csv.
    Sweep(ExperimentArgs),
    /// Runs the numerical self-test suite.
    Validate,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML configuration file; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set truth.r=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Base seed; same as `--set experiment.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo runs; same as `--set experiment.n_runs=N`.
    #[arg(long)]
    pub runs: Option<usize>,
}

impl ExperimentArgs {
    /// Effective configuration: file, then `--set`, then `--seed`/`--runs`.
    pub fn load(&self) -> Result<config::FileConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("experiment.seed={seed}"));
        }
        if let Some(runs) = self.runs {
            overrides.push(format!("experiment.n_runs={runs}"));
        }
        config::load(self.config.as_deref(), &overrides)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(
    path: &Path,
    write: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

fn prepare(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let file = args.load()?;
    let cfg = file.to_experiment()?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let echo = args.out.join(ECHO_FILE);
    fs::write(&echo, file.to_toml()).map_err(io_err(&echo))?;
    Ok(cfg)
}

pub fn summary_table(metrics: &RunMetrics) -> String {
    let w = &metrics.window;
    let mut s = format!(
        "{} runs used, {} excluded; steady state over steps {}..={}\n",
        metrics.runs_used,
        metrics.excluded,
        w.start + 1,
        w.end
    );
    s += &format!("{:<10} {:>14} {:>14}\n", "variant", "rmse_pos", "cov_err");
    for v in &metrics.variants {
        s += &format!(
            "{:<10} {:>14.6} {:>14.6}\n",
            v.label,
            v.mean_rmse(w.clone()),
            v.mean_cov_err(w.clone())
        );
    }
    s
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>8} {:<10} {:>14} {:>14}\n",
        "r", "variant", "avg_rmse_pos", "avg_cov_err"
    );
    for r in rows {
        s += &format!(
            "{:>8} {:<10} {:>14.6} {:>14.6}\n",
            r.r, r.label, r.avg_rmse_pos, r.avg_cov_err
        );
    }
    s
}

pub fn cmd_run(args: &ExperimentArgs, out: &mut impl Write) -> Result<RunMetrics, CliError> {
    let cfg = prepare(args)?;
    let metrics = sim::run_monte_carlo(&cfg)?;
    let path = args.out.join(METRICS_FILE);
    write_file(&path, |buf| sim::write_metrics_csv(&metrics, buf))?;
    let _ = write!(out, "{}", summary_table(&metrics));
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(metrics)
}

pub fn cmd_sweep(args: &ExperimentArgs, out: &mut impl Write) -> Result<Vec<SweepRow>, CliError> {
    let cfg = prepare(args)?;
    let rows = sim::sweep_noise_levels(&cfg)?;
    let path = args.out.join(SWEEP_FILE);
    write_file(&path, |buf| sim::write_sweep_csv(&rows, buf))?;
    let _ = write!(out, "{}", sweep_table(&rows));
    let mut seen = Vec::new();
    for row in rows.iter().filter(|r| r.excluded > 0) {
        if !seen.contains(&row.r.to_bits()) {
            seen.push(row.r.to_bits());
            let _ = writeln!(out, "r = {}: {} runs excluded", row.r, row.excluded);
        }
    }
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(rows)
}

pub fn cmd_validate(out: &mut impl Write) -> Result<(), CliError> {
    let report = selfcheck::run_all();
    let _ = writeln!(out, "{report}");
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::SelfCheck)
    }
}

/// Executes a parsed command line and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a, &mut out).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(a, &mut out).map(|_| ()),
        Command::Validate => cmd_validate(&mut out),
    };
    match res {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("immrm: {e}");
            e.exit_code()
        }
    }
}
