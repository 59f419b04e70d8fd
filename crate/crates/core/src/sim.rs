//! Monte Carlo comparison of filter variants on the coordinated-turn scenario.
//!
//! Every run draws one truth realization from its own generator, seeded with
//! `base_seed + run_index`, and feeds the identical measurement sequence and
//! initial estimate to every configured filter. Runs execute in parallel and
//! are reduced in run-index order.

use std::io::{self, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dist::GaussianEstimate;
use crate::error::{Error, Result};
use crate::imm::{FilterConfig, ImmFilter, ModeBank, Variant};
use crate::linalg;
use crate::model::{self, build_ct_scenario, simulate_truth, TruthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub truth: TruthConfig,
    /// Filters to compare. A [`Variant::KnownR`] entry without `known_r`
    /// is given the true measurement covariance of each run.
    pub filters: Vec<FilterConfig>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub r_sweep: Vec<f64>,
    /// Steps (zero-based) averaged for steady-state summaries; `None` means
    /// the final half of the horizon.
    pub steady_state_window: Option<Range<usize>>,
    /// Diagonal of the initial state covariance, also the spread of the
    /// initial estimate around the true initial state.
    pub initial_cov_diag: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            truth: TruthConfig::default(),
            filters: Variant::ALL.iter().map(|&v| FilterConfig::new(v)).collect(),
            n_runs: 1000,
            base_seed: 2014,
            r_sweep: vec![50.0, 100.0, 200.0, 400.0],
            steady_state_window: None,
            initial_cov_diag: vec![100.0, 10.0, 100.0, 10.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.n_runs == 0 {
            return Err(Error::Config("experiment.n_runs must be at least 1".into()));
        }
        if self.filters.is_empty() {
            return Err(Error::Config(
                "filters.variants must name at least one variant".into(),
            ));
        }
        if let Some(r) = self.r_sweep.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!(
                "experiment.r_sweep values must be positive, got {r}"
            )));
        }
        if self.initial_cov_diag.len() != 4 || self.initial_cov_diag.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "experiment.initial_cov must have 4 positive entries".into(),
            ));
        }
        let w = self.window();
        if w.start >= w.end || w.end > self.truth.horizon {
            return Err(Error::Config(format!(
                "experiment.window {w:?} does not fit horizon {}",
                self.truth.horizon
            )));
        }
        for f in &self.filters {
            self.resolve_filter(f).validate()?;
        }
        Ok(())
    }

    pub fn window(&self) -> Range<usize> {
        self.steady_state_window
            .clone()
            .unwrap_or(self.truth.horizon / 2..self.truth.horizon)
    }

    fn resolve_filter(&self, f: &FilterConfig) -> FilterConfig {
        let mut f = f.clone();
        if f.variant == Variant::KnownR && f.known_r.is_none() {
            f.known_r = Some(model::true_measurement_cov(self.truth.r));
        }
        f
    }

    fn initial_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.initial_cov_diag.clone()))
    }

    /// Label per filter; repeated variants are suffixed with their index.
    pub fn labels(&self) -> Vec<String> {
        self.filters
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let dup = self
                    .filters
                    .iter()
                    .filter(|g| g.variant == f.variant)
                    .count()
                    > 1;
                if dup {
                    format!("{}_{i}", f.variant)
                } else {
                    f.variant.to_string()
                }
            })
            .collect()
    }
}

/// Per-step metrics of one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantMetrics {
    pub label: String,
    pub variant: Variant,
    pub rmse_pos: Vec<f64>,
    pub cov_err: Vec<f64>,
}

impl VariantMetrics {
    pub fn mean_rmse(&self, window: Range<usize>) -> f64 {
        mean(&self.rmse_pos[window])
    }

    pub fn mean_cov_err(&self, window: Range<usize>) -> f64 {
        mean(&self.cov_err[window])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub variants: Vec<VariantMetrics>,
    pub horizon: usize,
    pub runs_used: usize,
    /// Runs dropped because some filter diverged.
    pub excluded: usize,
    pub window: Range<usize>,
}

impl RunMetrics {
    pub fn get(&self, label: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.label == label)
    }

    pub fn by_variant(&self, variant: Variant) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Position RMSE per step across runs; positions are state entries 0 and 2.
pub fn rmse_position(
    estimates: &[Vec<DVector<f64>>],
    truths: &[Vec<DVector<f64>>],
) -> Result<Vec<f64>> {
    let horizon = check_shapes(
        estimates.len(),
        truths.len(),
        estimates.iter().map(Vec::len),
        truths.iter().map(Vec::len),
    )?;
    let n = estimates.len() as f64;
    Ok((0..horizon)
        .map(|k| {
            let sum: f64 = estimates
                .iter()
                .zip(truths)
                .map(|(e, t)| (e[k][0] - t[k][0]).powi(2) + (e[k][2] - t[k][2]).powi(2))
                .sum();
            (sum / n).sqrt()
        })
        .collect())
}

/// Normalized Frobenius RMS error of the covariance estimates per step:
/// `sqrt(mean ‖R̂ − R‖²_F) / ‖R‖_F`.
pub fn cov_error(estimates: &[Vec<DMatrix<f64>>], truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    let runs = estimates.len();
    if runs == 0 {
        return Err(Error::Shape("no runs".into()));
    }
    let horizon = estimates[0].len();
    if estimates.iter().any(|e| e.len() != horizon) {
        return Err(Error::Shape("runs have different horizons".into()));
    }
    let norm = truth.norm();
    (0..horizon)
        .map(|k| {
            let mut sum = 0.0;
            for e in estimates {
                if e[k].shape() != truth.shape() {
                    return Err(Error::DimensionMismatch {
                        expected: truth.nrows(),
                        got: e[k].nrows(),
                    });
                }
                sum += (&e[k] - truth).norm_squared();
            }
            Ok((sum / runs as f64).sqrt() / norm)
        })
        .collect()
}

fn check_shapes(
    a: usize,
    b: usize,
    la: impl Iterator<Item = usize>,
    lb: impl Iterator<Item = usize>,
) -> Result<usize> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("{a} estimate runs vs {b} truth runs")));
    }
    let la: Vec<_> = la.collect();
    let lb: Vec<_> = lb.collect();
    let h = la[0];
    if la.iter().chain(&lb).any(|&l| l != h) {
        return Err(Error::Shape("runs have different horizons".into()));
    }
    Ok(h)
}

/// FNV-1a over the bit patterns of a measurement sequence.
pub fn measurement_hash(zs: &[DVector<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for z in zs {
        for v in z.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// Output of one filter on one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub states: Vec<DVector<f64>>,
    pub r_estimates: Vec<DMatrix<f64>>,
    /// Hash of the measurements this filter consumed.
    pub consumed_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleRun {
    pub truth: model::Trajectory,
    /// `Err` when the filter diverged.
    pub traces: Vec<std::result::Result<FilterTrace, Error>>,
}

impl SingleRun {
    pub fn healthy(&self) -> bool {
        self.traces.iter().all(|t| t.is_ok())
    }
}

/// Simulates run `run_index` and feeds it to every filter.
pub fn run_single(cfg: &ExperimentConfig, run_index: usize) -> Result<SingleRun> {
    let model = build_ct_scenario(&cfg.truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed.wrapping_add(run_index as u64));
    let truth = simulate_truth(&model, &cfg.truth, &mut rng)?;
    let p0 = cfg.initial_cov();
    let x0_hat = &cfg.truth.x0 + model::sample_gaussian(&model::sampling_factor(&p0), &mut rng);
    let start = GaussianEstimate::new(x0_hat, p0)?;

    let traces = cfg
        .filters
        .iter()
        .map(|f| {
            let f = cfg.resolve_filter(f);
            let bank = ModeBank::uniform(f.initial_estimate(start.clone())?, model.num_modes())?;
            let mut filter = ImmFilter::new(model.clone(), f, bank)?;
            run_filter(&mut filter, &truth.measurements)
        })
        .collect();
    Ok(SingleRun { truth, traces })
}

fn run_filter(filter: &mut ImmFilter, zs: &[DVector<f64>]) -> Result<FilterTrace> {
    let mut states = Vec::with_capacity(zs.len());
    let mut r_estimates = Vec::with_capacity(zs.len());
    let mut consumed = Vec::with_capacity(zs.len());
    for z in zs {
        consumed.push(z.clone());
        let out = filter.step(z)?;
        check_healthy(&out.fused_state, &out.fused_r)?;
        states.push(out.fused_state.mean);
        r_estimates.push(out.fused_r);
    }
    Ok(FilterTrace {
        states,
        r_estimates,
        consumed_hash: measurement_hash(&consumed),
    })
}

fn check_healthy(state: &GaussianEstimate, r: &DMatrix<f64>) -> Result<()> {
    let finite = state
        .mean
        .iter()
        .chain(state.cov.iter())
        .chain(r.iter())
        .all(|v| v.is_finite());
    if !finite || !linalg::is_spd(r) || linalg::cholesky(&state.cov, "fused covariance").is_err() {
        return Err(Error::SingularMatrix(
            "fused estimate lost positive definiteness",
        ));
    }
    Ok(())
}

pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let runs: Vec<SingleRun> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| run_single(cfg, i))
        .collect::<Result<_>>()?;

    let total = runs.len();
    let healthy: Vec<&SingleRun> = runs.iter().filter(|r| r.healthy()).collect();
    if healthy.is_empty() {
        return Err(Error::SingularMatrix("every Monte Carlo run diverged"));
    }
    let truths: Vec<Vec<DVector<f64>>> = healthy.iter().map(|r| r.truth.states.clone()).collect();
    let r_true = model::true_measurement_cov(cfg.truth.r);
    let labels = cfg.labels();

    let variants = cfg
        .filters
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let traces: Vec<&FilterTrace> = healthy
                .iter()
                .map(|r| r.traces[i].as_ref().expect("healthy run"))
                .collect();
            let states: Vec<_> = traces.iter().map(|t| t.states.clone()).collect();
            let rs: Vec<_> = traces.iter().map(|t| t.r_estimates.clone()).collect();
            Ok(VariantMetrics {
                label: labels[i].clone(),
                variant: f.variant,
                rmse_pos: rmse_position(&states, &truths)?,
                cov_err: cov_error(&rs, &r_true)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RunMetrics {
        variants,
        horizon: cfg.truth.horizon,
        runs_used: healthy.len(),
        excluded: total - healthy.len(),
        window: cfg.window(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub label: String,
    pub variant: Variant,
    pub avg_rmse_pos: f64,
    pub avg_cov_err: f64,
    pub excluded: usize,
}

/// Runs [`run_monte_carlo`] at every `r` in `cfg.r_sweep` and averages each
/// metric over the full horizon.
pub fn sweep_noise_levels(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if cfg.r_sweep.is_empty() {
        return Err(Error::Config("experiment.r_sweep must not be empty".into()));
    }
    let mut rows = Vec::new();
    for &r in &cfg.r_sweep {
        let mut c = cfg.clone();
        c.truth.r = r;
        let metrics = run_monte_carlo(&c)?;
        let full = 0..metrics.horizon;
        for v in &metrics.variants {
            rows.push(SweepRow {
                r,
                label: v.label.clone(),
                variant: v.variant,
                avg_rmse_pos: v.mean_rmse(full.clone()),
                avg_cov_err: v.mean_cov_err(full.clone()),
                excluded: metrics.excluded,
            });
        }
    }
    Ok(rows)
}

pub const METRICS_HEADER: &str = "step,variant,rmse_pos,cov_err";
pub const SWEEP_HEADER: &str = "r,variant,avg_rmse_pos,avg_cov_err";

/// Per-step CSV, one block of rows per variant, steps numbered from 1.
pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, mut out: W) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for v in &metrics.variants {
        for k in 0..metrics.horizon {
            writeln!(
                out,
                "{},{},{:?},{:?}",
                k + 1,
                v.label,
                v.rmse_pos[k],
                v.cov_err[k]
            )?;
        }
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for row in rows {
        writeln!(
            out,
            "{:?},{},{:?},{:?}",
            row.r, row.label, row.avg_rmse_pos, row.avg_cov_err
        )?;
    }
    Ok(())
}
