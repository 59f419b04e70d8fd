//! Jump Markov linear systems and the coordinated-turn tracking scenario.
//!
//! Mode indices are zero-based throughout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on each row of the transition matrix summing to one.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// One mode of the switching system: `x_k = F x_{k-1} + G w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMode {
    pub transition: DMatrix<f64>,
    pub noise_gain: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
    /// Turn rate in rad/s. Metadata only.
    pub turn_rate: f64,
}

impl LinearMode {
    pub fn new(
        transition: DMatrix<f64>,
        noise_gain: DMatrix<f64>,
        process_cov: DMatrix<f64>,
        turn_rate: f64,
    ) -> Result<Self> {
        let n = transition.nrows();
        if !transition.is_square() {
            return Err(Error::Shape("transition matrix must be square".into()));
        }
        if noise_gain.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: noise_gain.nrows(),
            });
        }
        let p = noise_gain.ncols();
        if process_cov.nrows() != p || process_cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: process_cov.nrows(),
            });
        }
        if !linalg::is_symmetric(&process_cov) {
            return Err(Error::InvalidParameter(
                "process covariance is not symmetric".into(),
            ));
        }
        let floor = -1e-10 * process_cov.trace().abs().max(f64::MIN_POSITIVE);
        if linalg::min_eigenvalue(&process_cov) < floor {
            return Err(Error::InvalidParameter(
                "process covariance is not PSD".into(),
            ));
        }
        Ok(Self {
            transition,
            noise_gain,
            process_cov,
            turn_rate,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    /// `G Q Gᵀ`.
    pub fn state_noise_cov(&self) -> DMatrix<f64> {
        &self.noise_gain * &self.process_cov * self.noise_gain.transpose()
    }
}

/// Row-stochastic mode transition matrix, `pi[(i, j)] = P{r_k = j | r_{k-1} = i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pi: DMatrix<f64>,
}

impl MarkovChain {
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        if !pi.is_square() || pi.nrows() == 0 {
            return Err(Error::Shape(
                "transition matrix must be square and non-empty".into(),
            ));
        }
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter(
                "transition probabilities must lie in [0, 1]".into(),
            ));
        }
        for (i, row) in pi.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "row {i} of the transition matrix sums to {s}"
                )));
            }
        }
        Ok(Self { pi })
    }

    /// `stay` on the diagonal, the remainder spread evenly off it.
    pub fn uniform_switching(modes: usize, stay: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if modes == 1 {
            return Self::new(DMatrix::from_element(1, 1, 1.0));
        }
        let off = (1.0 - stay) / (modes - 1) as f64;
        Self::new(DMatrix::from_fn(modes, modes, |i, j| {
            if i == j {
                stay
            } else {
                off
            }
        }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn modes(&self) -> usize {
        self.pi.nrows()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.pi[(from, to)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpMarkovModel {
    pub modes: Vec<LinearMode>,
    pub chain: MarkovChain,
    /// Shared measurement map `H` (`m × n`).
    pub measurement: DMatrix<f64>,
}

impl JumpMarkovModel {
    pub fn new(
        modes: Vec<LinearMode>,
        chain: MarkovChain,
        measurement: DMatrix<f64>,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("model needs at least one mode".into()));
        }
        if chain.modes() != modes.len() {
            return Err(Error::DimensionMismatch {
                expected: modes.len(),
                got: chain.modes(),
            });
        }
        let n = modes[0].state_dim();
        if let Some(bad) = modes.iter().find(|m| m.state_dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.state_dim(),
            });
        }
        if measurement.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: measurement.ncols(),
            });
        }
        Ok(Self {
            modes,
            chain,
            measurement,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.measurement.ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.measurement.nrows()
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }
}

/// Ground-truth scenario parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthConfig {
    /// Process-noise power spectral density.
    pub q: f64,
    /// Measurement-noise level; the true covariance is `[[r, r/20], [r/20, r]]`.
    pub r: f64,
    /// Sampling period in seconds.
    pub period: f64,
    /// Turn rates in rad/s, one mode each.
    pub turn_rates: Vec<f64>,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub initial_mode: usize,
    /// Diagonal of the transition matrix.
    pub stay_prob: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            q: 0.09,
            r: 200.0,
            period: 1.0,
            turn_rates: vec![(-4f64).to_radians(), 0.0, 4f64.to_radians()],
            horizon: 100,
            x0: DVector::from_vec(vec![0.0, 10.0, 0.0, 10.0]),
            initial_mode: 1,
            stay_prob: 0.8,
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("q", self.q), ("r", self.r), ("period", self.period)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "truth.{name} must be positive, got {v}"
                )));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("truth.horizon must be at least 1".into()));
        }
        if self.turn_rates.is_empty() {
            return Err(Error::Config(
                "truth.turn_rates_deg must not be empty".into(),
            ));
        }
        if self.initial_mode >= self.turn_rates.len() {
            return Err(Error::Config(format!(
                "truth.initial_mode {} is out of range for {} modes",
                self.initial_mode,
                self.turn_rates.len()
            )));
        }
        if self.x0.len() != 4 {
            return Err(Error::Config("truth.x0 must have 4 entries".into()));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return Err(Error::Config("truth.stay_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Coordinated-turn transition over `(p_x, v_x, p_y, v_y)`.
pub fn ct_transition(omega: f64, period: f64) -> DMatrix<f64> {
    let wt = omega * period;
    let (sin_wt, cos_wt) = wt.sin_cos();
    let (a, b) = if wt.abs() < 1e-9 {
        (period, 0.0)
    } else {
        (sin_wt / omega, (1.0 - cos_wt) / omega)
    };
    #[rustfmt::skip]
    let f = DMatrix::from_row_slice(4, 4, &[
        1.0, a,      0.0, -b,
        0.0, cos_wt, 0.0, -sin_wt,
        0.0, b,      1.0, a,
        0.0, sin_wt, 0.0, cos_wt,
    ]);
    f
}

/// `q · I₂ ⊗ [[T⁴/4, T³/2], [T³/2, T²]]`.
pub fn ct_process_noise(q: f64, period: f64) -> DMatrix<f64> {
    let t2 = period * period;
    let block = DMatrix::from_row_slice(
        2,
        2,
        &[t2 * t2 / 4.0, t2 * period / 2.0, t2 * period / 2.0, t2],
    );
    linalg::kron(&DMatrix::identity(2, 2), &block) * q
}

/// `[[r, r/20], [r/20, r]]`.
pub fn true_measurement_cov(r: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[r, r / 20.0, r / 20.0, r])
}

/// Position-only measurement map.
pub fn position_measurement() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
}

/// Assembles one coordinated-turn mode per turn rate sharing a single `Q`.
pub fn build_ct_scenario(cfg: &TruthConfig) -> Result<JumpMarkovModel> {
    if cfg.turn_rates.is_empty() {
        return Err(Error::Config(
            "truth.turn_rates_deg must not be empty".into(),
        ));
    }
    let q = ct_process_noise(cfg.q, cfg.period);
    let modes = cfg
        .turn_rates
        .iter()
        .map(|&w| {
            LinearMode::new(
                ct_transition(w, cfg.period),
                DMatrix::identity(4, 4),
                q.clone(),
                w,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let chain = MarkovChain::uniform_switching(modes.len(), cfg.stay_prob)?;
    JumpMarkovModel::new(modes, chain, position_measurement())
}

/// Draws `horizon` modes. The first entry is `initial`; each later entry is
/// drawn from the row of its predecessor.
pub fn sample_mode_sequence<R: Rng + ?Sized>(
    chain: &MarkovChain,
    initial: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if initial >= chain.modes() {
        return Err(Error::InvalidParameter(format!(
            "initial mode {initial} out of range for {} modes",
            chain.modes()
        )));
    }
    let mut seq = Vec::with_capacity(horizon);
    let mut current = initial;
    for k in 0..horizon {
        if k > 0 {
            current = draw_next(chain, current, rng);
        }
        seq.push(current);
    }
    Ok(seq)
}

fn draw_next<R: Rng + ?Sized>(chain: &MarkovChain, from: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let last = chain.modes() - 1;
    for j in 0..last {
        acc += chain.prob(from, j);
        if u < acc {
            return j;
        }
    }
    last
}

/// A factor `L` with `L Lᵀ = cov`; falls back to a symmetric square root
/// when `cov` is only semidefinite.
pub fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = nalgebra::Cholesky::new(cov.clone()) {
        return chol.l();
    }
    let eig = linalg::symmetrize(cov).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn sample_gaussian<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let e = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * e
}

/// One realization of the truth: `states[k]`, `modes[k]` and
/// `measurements[k]` all refer to time step `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub modes: Vec<usize>,
    pub measurements: Vec<DVector<f64>>,
}

pub fn simulate_truth<R: Rng + ?Sized>(
    model: &JumpMarkovModel,
    cfg: &TruthConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let n = model.state_dim();
    if cfg.x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cfg.x0.len(),
        });
    }
    let meas_cov = true_measurement_cov(cfg.r);
    if meas_cov.nrows() != model.meas_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.meas_dim(),
            got: meas_cov.nrows(),
        });
    }
    simulate_with_noise(
        model,
        &cfg.x0,
        cfg.initial_mode,
        cfg.horizon,
        &meas_cov,
        rng,
    )
}

/// Same as [`simulate_truth`] with an explicit measurement covariance.
pub fn simulate_with_noise<R: Rng + ?Sized>(
    model: &JumpMarkovModel,
    x0: &DVector<f64>,
    initial_mode: usize,
    horizon: usize,
    meas_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Trajectory> {
    let modes = sample_mode_sequence(&model.chain, initial_mode, horizon, rng)?;
    let proc_factors: Vec<_> = model
        .modes
        .iter()
        .map(|m| sampling_factor(&m.process_cov))
        .collect();
    let meas_factor = sampling_factor(meas_cov);

    let mut states = Vec::with_capacity(horizon);
    let mut measurements = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for &mode in &modes {
        let lm = &model.modes[mode];
        let w = sample_gaussian(&proc_factors[mode], rng);
        x = &lm.transition * &x + &lm.noise_gain * w;
        let v = sample_gaussian(&meas_factor, rng);
        measurements.push(&model.measurement * &x + v);
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        modes,
        measurements,
    })
}
