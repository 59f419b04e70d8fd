//! Numerical self-test suite.
//!
//! Every check compares a closed-form result from this crate against an
//! oracle computed independently, mostly brute-force search or quadrature.
//! The suite backs the `validate` command and the acceptance tests.

pub mod quad;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{kl_fuse_iw, weighted_kl_objective, InverseWishart, WeightedComponents};
use crate::imm::{
    fuse_output, vb_measurement_update, FilterConfig, GiwEstimate, ImmFilter, ModeBank, Variant,
};
use crate::model::{build_ct_scenario, simulate_truth, TruthConfig};
use crate::{Error, GaussianEstimate, Result};

/// Relative tolerance handed to every quadrature.
pub const QUAD_REL_TOL: f64 = 1e-9;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: &'static str, res: Result<(bool, String)>) -> Self {
        match res {
            Ok((passed, detail)) => Self {
                name,
                passed,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        write!(f, "{passed}/{} checks passed", self.checks.len())
    }
}

/// Runs the whole suite.
pub fn run_all() -> Report {
    Report {
        checks: vec![
            kl_minimizer_grid(),
            kl_minimizer_probes(),
            kl_minimizer_random_sets(),
            geometric_mean_density(),
            normalization(),
            kl_quadrature(),
            kl_mm_coincidence(),
            vb_regression(),
        ],
    }
}

fn scalar_logpdf(iw: &InverseWishart, r: f64) -> f64 {
    iw.logpdf(&DMatrix::from_element(1, 1, r))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Brute-force minimum of the weighted objective over a rectangular grid of
/// scalar inverse-Wisharts. Returns `(value, degree, scale)`.
fn scalar_grid_min(
    wc: &WeightedComponents<InverseWishart>,
    degrees: (f64, f64),
    scales: (f64, f64),
    step: f64,
) -> Result<(f64, f64, f64)> {
    let nd = ((degrees.1 - degrees.0) / step).round() as usize;
    let ns = ((scales.1 - scales.0) / step).round() as usize;
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for i in 0..=nd {
        let nu = degrees.0 + step * i as f64;
        for j in 0..=ns {
            let s = scales.0 + step * j as f64;
            let v = weighted_kl_objective(&InverseWishart::scalar(nu, s)?, wc)?;
            if v < best.0 {
                best = (v, nu, s);
            }
        }
    }
    Ok(best)
}

const GRID_STEP: f64 = 0.05;

/// The fused parameters minimize the weighted objective over a fine grid.
pub fn kl_minimizer_grid() -> Check {
    Check::from_result(
        "kl_minimizer_grid_m1",
        (|| {
            let wc = WeightedComponents::new(
                vec![0.5, 0.5],
                vec![
                    InverseWishart::scalar(6.0, 2.0)?,
                    InverseWishart::scalar(10.0, 4.0)?,
                ],
            )?;
            let fused = kl_fuse_iw(&wc)?;
            let at_fused = weighted_kl_objective(&fused, &wc)?;
            let (v, nu, s) = scalar_grid_min(&wc, (4.1, 20.0), (0.1, 10.0), GRID_STEP)?;
            let close = (nu - 8.0).abs() <= GRID_STEP + 1e-9 && (s - 3.0).abs() <= GRID_STEP + 1e-9;
            let passed = close && at_fused <= v + 1e-12;
            Ok((
            passed,
            format!(
                "grid argmin ({nu:.2}, {s:.2}), closed form ({}, {}), objective {at_fused:.3e} vs grid {v:.3e}",
                fused.degree(),
                fused.scale()[(0, 0)]
            ),
        ))
        })(),
    )
}

/// Perturbations of an m = 2 fused estimate in every parameter direction.
fn probe_directions(m: usize) -> Vec<(f64, DMatrix<f64>)> {
    let mut dirs = vec![(1.0, DMatrix::zeros(m, m)), (-1.0, DMatrix::zeros(m, m))];
    for i in 0..m {
        for j in i..m {
            let mut e = DMatrix::zeros(m, m);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            dirs.push((0.0, e.clone()));
            dirs.push((0.0, -e.clone()));
            dirs.push((1.0, e.clone()));
            dirs.push((-1.0, -e));
        }
    }
    dirs
}

/// Smallest gap `objective(probe) − objective(fused)` over all probes.
fn worst_probe_gap(wc: &WeightedComponents<InverseWishart>) -> Result<f64> {
    let fused = kl_fuse_iw(wc)?;
    let m = fused.dim();
    let base = weighted_kl_objective(&fused, wc)?;
    let mut worst = f64::INFINITY;
    for delta in [1e-1, 1e-2, 1e-3] {
        for (dnu, ds) in probe_directions(m) {
            let nu = fused.degree() + delta * dnu;
            let scale = fused.scale() + ds * (delta * fused.scale().amax());
            let Ok(probe) = InverseWishart::new(nu, scale) else {
                continue;
            };
            worst = worst.min(weighted_kl_objective(&probe, wc)? - base);
        }
    }
    Ok(worst)
}

const PROBE_TOL: f64 = 1e-9;

pub fn kl_minimizer_probes() -> Check {
    Check::from_result(
        "kl_minimizer_probes_m2",
        (|| {
            let wc = WeightedComponents::new(
                vec![0.3, 0.7],
                vec![
                    InverseWishart::new(9.0, DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]))?,
                    InverseWishart::new(
                        15.0,
                        DMatrix::from_row_slice(2, 2, &[20.0, -2.0, -2.0, 9.0]),
                    )?,
                ],
            )?;
            let gap = worst_probe_gap(&wc)?;
            Ok((gap >= -PROBE_TOL, format!("smallest probe gap {gap:.3e}")))
        })(),
    )
}

fn random_spd<R: Rng>(rng: &mut R, m: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() * scale + DMatrix::identity(m, m) * (0.2 * scale)
}

fn random_set<R: Rng>(
    rng: &mut R,
    m: usize,
    n: usize,
) -> Result<WeightedComponents<InverseWishart>> {
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..n - 1].iter().sum();
    weights[n - 1] = 1.0 - head;
    let comps = (0..n)
        .map(|_| {
            let nu = 2.0 * m as f64 + 2.5 + 20.0 * rng.random::<f64>();
            let spread = 1.0 + 9.0 * rng.random::<f64>();
            InverseWishart::new(nu, random_spd(rng, m, spread))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedComponents::new(weights, comps)
}

/// Random component sets at m = 1 and m = 2. The scalar sets are also
/// checked against a global grid.
pub fn kl_minimizer_random_sets() -> Check {
    Check::from_result(
        "kl_minimizer_random_sets",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(20_140_701);
            let mut notes = Vec::new();
            let mut passed = true;
            for set in 0..3 {
                let wc = random_set(&mut rng, 1, 3)?;
                let fused = kl_fuse_iw(&wc)?;
                let at_fused = weighted_kl_objective(&fused, &wc)?;
                let gap = worst_probe_gap(&wc)?;
                let hi_nu = wc
                    .components()
                    .iter()
                    .map(|c| c.degree())
                    .fold(0.0, f64::max);
                let hi_s = wc
                    .components()
                    .iter()
                    .map(|c| c.scale()[(0, 0)])
                    .fold(0.0, f64::max);
                let (v, _, _) =
                    scalar_grid_min(&wc, (2.1, hi_nu + 1.0), (GRID_STEP, hi_s + 1.0), GRID_STEP)?;
                // Along the ridge of nearly equal means the objective is very flat,
                // so the grid argmin can sit several cells away at the same value.
                // The comparison is therefore on objective values.
                let margin = v - at_fused;
                let ok = gap >= -PROBE_TOL && margin >= -1e-12;
                passed &= ok;
                notes.push(format!(
                    "m=1 set {set}: grid margin {margin:.2e}, probe gap {gap:.2e}"
                ));
            }
            for set in 0..3 {
                let wc = random_set(&mut rng, 2, 3)?;
                let gap = worst_probe_gap(&wc)?;
                let ok = gap >= -PROBE_TOL;
                passed &= ok;
                notes.push(format!("m=2 set {set}: gap {gap:.2e}"));
            }
            Ok((passed, notes.join(", ")))
        })(),
    )
}

const GEOMETRIC_MEAN_TOL: f64 = 1e-8;

/// Normalized weighted geometric mean of the component densities against
/// the density of the fused parameters.
pub fn geometric_mean_density() -> Check {
    Check::from_result(
        "geometric_mean_density",
        (|| {
            let wc = WeightedComponents::new(
                vec![0.25, 0.45, 0.3],
                vec![
                    InverseWishart::scalar(6.0, 2.0)?,
                    InverseWishart::scalar(10.0, 4.0)?,
                    InverseWishart::scalar(25.0, 30.0)?,
                ],
            )?;
            let fused = kl_fuse_iw(&wc)?;
            let log_geo =
                |r: f64| -> f64 { wc.active().map(|(w, c)| w * scalar_logpdf(c, r)).sum() };
            let log_norm = quad::integrate_half_line(log_geo, |_| 1.0, QUAD_REL_TOL).ln();
            let (lo, hi) = (0.01f64.ln(), 100f64.ln());
            let points = 1000;
            let mut worst: f64 = 0.0;
            for i in 0..points {
                // Interior points of (0.01, 100), evenly spaced in log R.
                let r = (lo + (hi - lo) * (i as f64 + 0.5) / points as f64).exp();
                worst = worst.max((log_geo(r) - log_norm - scalar_logpdf(&fused, r)).abs());
            }
            Ok((
                worst <= GEOMETRIC_MEAN_TOL,
                format!("max log-density gap {worst:.3e} over {points} points"),
            ))
        })(),
    )
}

const NORMALIZATION_TOL: f64 = 1e-6;

pub fn normalization() -> Check {
    Check::from_result(
        "iw_normalization",
        (|| {
            let mut worst: f64 = 0.0;
            let mut count = 0;
            for nu in [4.0, 8.0, 20.0] {
                for s in [0.5, 2.0, 50.0] {
                    let iw = InverseWishart::scalar(nu, s)?;
                    let mass =
                        quad::integrate_half_line(|r| scalar_logpdf(&iw, r), |_| 1.0, QUAD_REL_TOL);
                    worst = worst.max((mass - 1.0).abs());
                    count += 1;
                }
            }
            Ok((
                worst <= NORMALIZATION_TOL,
                format!("{count} combinations, max |mass − 1| {worst:.3e}"),
            ))
        })(),
    )
}

/// Closed-form divergence against `∫ p log(p/q)`.
pub fn kl_quadrature() -> Check {
    Check::from_result(
        "kl_quadrature",
        (|| {
            let p = InverseWishart::scalar(6.0, 2.0)?;
            let q = InverseWishart::scalar(8.0, 3.0)?;
            let closed = p.kl_divergence(&q)?;
            let numeric = quad::integrate_half_line(
                |r| scalar_logpdf(&p, r),
                |r| scalar_logpdf(&p, r) - scalar_logpdf(&q, r),
                QUAD_REL_TOL,
            );
            let gap = (closed - numeric).abs();
            Ok((
                gap <= 1e-6,
                format!("closed {closed:.9}, quadrature {numeric:.9}"),
            ))
        })(),
    )
}

const COINCIDENCE_TOL: f64 = 1e-10;
const COINCIDENCE_SEED: u64 = 42;

fn initial_state(truth: &TruthConfig) -> Result<GaussianEstimate> {
    GaussianEstimate::new(
        truth.x0.clone(),
        DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 10.0, 100.0, 10.0])),
    )
}

type FusedRTrack = Vec<DMatrix<f64>>;

/// Fused R̂ trajectories of the two adaptive variants over one simulated run.
fn fused_r_trajectories(
    equalize: bool,
    prior_degrees: &[f64],
) -> Result<(FusedRTrack, FusedRTrack)> {
    let truth = TruthConfig::default();
    let model = build_ct_scenario(&truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(COINCIDENCE_SEED);
    let traj = simulate_truth(&model, &truth, &mut rng)?;
    let start = initial_state(&truth)?;

    let run = |variant: Variant| -> Result<FusedRTrack> {
        let mut cfg = FilterConfig::new(variant);
        cfg.equalize_degrees = equalize;
        let estimates = prior_degrees
            .iter()
            .map(|&nu| {
                Ok(GiwEstimate {
                    gaussian: start.clone(),
                    iw: Some(InverseWishart::new(nu, cfg.prior_scale.clone())?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = estimates.len();
        let bank = ModeBank::new(estimates, vec![1.0 / n as f64; n])?;
        let mut filter = ImmFilter::new(model.clone(), cfg, bank)?;
        traj.measurements
            .iter()
            .map(|z| filter.step(z).map(|o| o.fused_r))
            .collect()
    };
    Ok((run(Variant::Kl)?, run(Variant::Mm)?))
}

fn max_gap(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// KL and MM coincide when degrees agree and separate when they do not.
pub fn kl_mm_coincidence() -> Check {
    Check::from_result(
        "kl_mm_coincidence",
        (|| {
            let (kl, mm) = fused_r_trajectories(true, &[20.0; 3])?;
            let equal_gap = max_gap(&kl, &mm);
            let (kl, mm) = fused_r_trajectories(false, &[12.0, 20.0, 40.0])?;
            let unequal_gap = max_gap(&kl, &mm);

            let part = |nu: f64, s: f64| -> Result<GiwEstimate> {
                Ok(GiwEstimate {
                    gaussian: GaussianEstimate::new(DVector::zeros(4), DMatrix::identity(4, 4))?,
                    iw: Some(InverseWishart::new(nu, DMatrix::identity(2, 2) * s)?),
                })
            };
            let bank = ModeBank::new(vec![part(10.0, 4.0)?, part(20.0, 28.0)?], vec![0.5, 0.5])?;
            let r_kl = fuse_output(&bank, &FilterConfig::new(Variant::Kl))?.fused_r;
            let r_mm = fuse_output(&bank, &FilterConfig::new(Variant::Mm))?.fused_r;
            let example_ok =
                (r_kl[(0, 0)] - 16.0 / 9.0).abs() < 1e-12 && (r_mm[(0, 0)] - 1.5).abs() < 1e-12;

            let passed =
                equal_gap <= COINCIDENCE_TOL && unequal_gap > COINCIDENCE_TOL && example_ok;
            Ok((
                passed,
                format!(
                "{} steps: equal-degree gap {equal_gap:.3e}, unequal-degree gap {unequal_gap:.3e}; \
                 example R̂ {:.4} (KL) vs {:.4} (MM)",
                kl.len(),
                r_kl[(0, 0)],
                r_mm[(0, 0)]
            ),
            ))
        })(),
    )
}

pub fn vb_regression() -> Check {
    Check::from_result(
        "vb_scalar_regression",
        (|| {
            let pred = GiwEstimate {
                gaussian: GaussianEstimate::new(
                    DVector::from_element(1, 0.0),
                    DMatrix::from_element(1, 1, 1.0),
                )?,
                iw: Some(InverseWishart::scalar(6.0, 2.0)?),
            };
            let out = vb_measurement_update(
                &pred,
                &DVector::from_element(1, 1.0),
                &DMatrix::from_element(1, 1, 1.0),
                2,
            )?
            .estimate;
            let iw = out
                .iw
                .ok_or(Error::Domain("variational update lost its IW part".into()))?;
            // Two fixed-point passes by hand: R̂ = 2/3, then Σ = 2.56 and R̂ = 2.56/3.
            let gain: f64 = 1.0 / (1.0 + 2.56 / 3.0);
            let expected = 2.0 + (1.0 - gain).powi(2) + (1.0 - gain);
            let gap = (iw.scale()[(0, 0)] - expected)
                .abs()
                .max((iw.degree() - 7.0).abs());
            Ok((
                gap <= 1e-9,
                format!("ν = {}, Σ = {:.9}", iw.degree(), iw.scale()[(0, 0)]),
            ))
        })(),
    )
}
