//! One IMM recursion with a Gaussian state and an inverse-Wishart
//! measurement-noise covariance per mode.
//!
//! A cycle runs four stages: mixing of the mode-conditioned posteriors,
//! mode-matched prediction and variational measurement update, mode
//! probability update, and fusion of the mode-conditioned posteriors into a
//! single output. The three [`Variant`]s differ only in how the
//! inverse-Wishart parts are combined (or whether they exist at all).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dist::fusion::{self, DegreeRule, WeightedComponents};
use crate::dist::gaussian::{gaussian_logpdf, GaussianEstimate};
use crate::dist::inverse_wishart::InverseWishart;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{JumpMarkovModel, LinearMode, MarkovChain};

/// Tolerance on the mode probabilities summing to one.
pub const MODE_PROB_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Weighted-KL fusion of the inverse-Wishart parts.
    Kl,
    /// Moment-matching fusion of the inverse-Wishart parts.
    Mm,
    /// Measurement covariance known; plain IMM Kalman filter.
    KnownR,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Kl, Variant::Mm, Variant::KnownR];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Kl => "KL",
            Variant::Mm => "MM",
            Variant::KnownR => "KNOWN_R",
        }
    }

    pub fn is_adaptive(self) -> bool {
        self != Variant::KnownR
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "KL" => Ok(Variant::Kl),
            "MM" => Ok(Variant::Mm),
            "KNOWN_R" | "KF" => Ok(Variant::KnownR),
            other => Err(Error::Config(format!("unknown filter variant `{other}`"))),
        }
    }
}

/// Gaussian state estimate paired with an optional inverse-Wishart over the
/// measurement-noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GiwEstimate {
    pub gaussian: GaussianEstimate,
    pub iw: Option<InverseWishart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeBank {
    pub estimates: Vec<GiwEstimate>,
    pub mode_probs: Vec<f64>,
}

impl ModeBank {
    pub fn new(estimates: Vec<GiwEstimate>, mode_probs: Vec<f64>) -> Result<Self> {
        if estimates.len() != mode_probs.len() {
            return Err(Error::DimensionMismatch {
                expected: estimates.len(),
                got: mode_probs.len(),
            });
        }
        check_simplex(&mode_probs)?;
        Ok(Self {
            estimates,
            mode_probs,
        })
    }

    /// Every mode starts from the same estimate with uniform probability.
    pub fn uniform(start: GiwEstimate, modes: usize) -> Result<Self> {
        Self::new(vec![start; modes], vec![1.0 / modes as f64; modes])
    }

    pub fn num_modes(&self) -> usize {
        self.estimates.len()
    }
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidWeights("empty probability vector".into()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidWeights(
            "mode probability outside [0, 1]".into(),
        ));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > MODE_PROB_TOL {
        return Err(Error::InvalidWeights(format!(
            "mode probabilities sum to {s}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub variant: Variant,
    /// Fixed-point iterations of the variational update (`N_c`).
    pub vb_iterations: usize,
    /// Forgetting factor on the inverse-Wishart parameters at prediction.
    pub forgetting: f64,
    /// Required for [`Variant::KnownR`], ignored otherwise.
    pub known_r: Option<DMatrix<f64>>,
    pub prior_degree: f64,
    pub prior_scale: DMatrix<f64>,
    /// Degree recovery used by [`Variant::Mm`].
    pub degree_rule: DegreeRule,
    /// Lower bound applied to the mode probabilities after each update.
    pub prob_floor: f64,
    /// Test hook: after every measurement update, overwrite all per-mode
    /// degrees with their mean.
    pub equalize_degrees: bool,
}

impl FilterConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            vb_iterations: 2,
            forgetting: 1.0,
            known_r: None,
            prior_degree: 20.0,
            prior_scale: DMatrix::identity(2, 2) * 50.0,
            degree_rule: DegreeRule::default(),
            prob_floor: 0.0,
            equalize_degrees: false,
        }
    }

    pub fn known(r: DMatrix<f64>) -> Self {
        Self {
            known_r: Some(r),
            ..Self::new(Variant::KnownR)
        }
    }

    pub fn meas_dim(&self) -> usize {
        match (&self.known_r, self.variant) {
            (Some(r), Variant::KnownR) => r.nrows(),
            _ => self.prior_scale.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vb_iterations < 1 {
            return Err(Error::Config("filters.nc must satisfy N_c >= 1".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "filters.forgetting must lie in (0, 1], got {}",
                self.forgetting
            )));
        }
        if !(0.0..1.0).contains(&self.prob_floor) {
            return Err(Error::Config(
                "filters.prob_floor must lie in [0, 1)".into(),
            ));
        }
        match self.variant {
            Variant::KnownR => {
                let r = self.known_r.as_ref().ok_or_else(|| {
                    Error::Config("filters.known_r is required by the KNOWN_R variant".into())
                })?;
                if !linalg::is_spd(r) {
                    return Err(Error::Config("filters.known_r must be SPD".into()));
                }
            }
            Variant::Kl | Variant::Mm => {
                let m = self.prior_scale.nrows() as f64;
                if !(self.prior_degree > 2.0 * m + 2.0) {
                    return Err(Error::Config(format!(
                        "filters.nu0 = {} must exceed 2m + 2 = {}",
                        self.prior_degree,
                        2.0 * m + 2.0
                    )));
                }
                if !linalg::is_spd(&self.prior_scale) {
                    return Err(Error::Config("filters.sigma0 must be SPD".into()));
                }
            }
        }
        Ok(())
    }

    /// Initial per-mode estimate for a given state prior.
    pub fn initial_estimate(&self, state: GaussianEstimate) -> Result<GiwEstimate> {
        let iw = match self.variant {
            Variant::KnownR => None,
            _ => Some(InverseWishart::new(
                self.prior_degree,
                self.prior_scale.clone(),
            )?),
        };
        Ok(GiwEstimate {
            gaussian: state,
            iw,
        })
    }
}

/// Mixing weights: column `j` of `weights` holds `μ^{i|j}` over `i`, and
/// `predicted[j] = Σ_l π_lj μ_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub weights: DMatrix<f64>,
    pub predicted: Vec<f64>,
}

impl Mixing {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.weights.column(j).iter().copied().collect()
    }
}

pub fn mixing_probabilities(chain: &MarkovChain, mode_probs: &[f64]) -> Result<Mixing> {
    let m = chain.modes();
    if mode_probs.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: mode_probs.len(),
        });
    }
    check_simplex(mode_probs)?;
    let mut weights = DMatrix::zeros(m, m);
    let mut predicted = vec![0.0; m];
    for j in 0..m {
        let c: f64 = (0..m).map(|l| chain.prob(l, j) * mode_probs[l]).sum();
        if c == 0.0 {
            return Err(Error::DegenerateMode(j));
        }
        predicted[j] = c;
        for i in 0..m {
            weights[(i, j)] = chain.prob(i, j) * mode_probs[i] / c;
        }
    }
    Ok(Mixing { weights, predicted })
}

/// Rescales a weight column so it sums to one exactly enough for
/// [`WeightedComponents`].
fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn fuse_iw(
    wc: &WeightedComponents<InverseWishart>,
    variant: Variant,
    rule: DegreeRule,
) -> Result<InverseWishart> {
    match variant {
        Variant::Kl => fusion::kl_fuse_iw(wc),
        Variant::Mm => fusion::mm_fuse_iw_with(wc, rule),
        Variant::KnownR => unreachable!("known-R banks carry no inverse-Wishart part"),
    }
}

fn iw_parts(bank: &ModeBank) -> Result<Vec<InverseWishart>> {
    bank.estimates
        .iter()
        .map(|e| {
            e.iw.clone().ok_or_else(|| {
                Error::InvalidParameter("adaptive variant needs inverse-Wishart parts".into())
            })
        })
        .collect()
}

/// Mixed initial conditions `(x̂^{0j}, P^{0j}, ν^{0j}, Σ^{0j})` for every mode.
pub fn mix_states(
    bank: &ModeBank,
    mixing: &Mixing,
    variant: Variant,
    rule: DegreeRule,
) -> Result<Vec<GiwEstimate>> {
    let m = bank.num_modes();
    if mixing.weights.nrows() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: mixing.weights.nrows(),
        });
    }
    let gaussians: Vec<_> = bank.estimates.iter().map(|e| e.gaussian.clone()).collect();
    let iws = if variant.is_adaptive() {
        Some(iw_parts(bank)?)
    } else {
        None
    };
    (0..m)
        .map(|j| {
            let w = normalized(mixing.column(j));
            let gaussian = fusion::moment_match_gaussians(&WeightedComponents::new(
                w.clone(),
                gaussians.clone(),
            )?)?;
            let iw = match &iws {
                Some(iws) => Some(fuse_iw(
                    &WeightedComponents::new(w, iws.clone())?,
                    variant,
                    rule,
                )?),
                None => None,
            };
            Ok(GiwEstimate { gaussian, iw })
        })
        .collect()
}

/// Kalman prediction of the state; mean-preserving spread of the
/// inverse-Wishart part with forgetting factor `forgetting`.
pub fn time_update(est: &GiwEstimate, mode: &LinearMode, forgetting: f64) -> Result<GiwEstimate> {
    let f = &mode.transition;
    let mean = f * &est.gaussian.mean;
    let cov = linalg::symmetrize(&(f * &est.gaussian.cov * f.transpose() + mode.state_noise_cov()));
    let iw = match &est.iw {
        Some(iw) if forgetting == 1.0 => Some(iw.clone()),
        Some(iw) => {
            let offset = 2.0 * iw.dim() as f64 + 2.0;
            Some(InverseWishart::new(
                forgetting * (iw.degree() - offset) + offset,
                iw.scale() * forgetting,
            )?)
        }
        None => None,
    };
    Ok(GiwEstimate {
        gaussian: GaussianEstimate { mean, cov },
        iw,
    })
}

/// Result of a mode-conditioned measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementUpdate<E> {
    pub estimate: E,
    /// `log Λ`, the log predictive density of the measurement.
    pub log_likelihood: f64,
}

impl<E> MeasurementUpdate<E> {
    pub fn likelihood(&self) -> f64 {
        self.log_likelihood.exp()
    }
}

struct KalmanGain {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn kalman_correct(
    pred: &GaussianEstimate,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<KalmanGain> {
    let ph_t = &pred.cov * h.transpose();
    let s = linalg::symmetrize(&(h * &ph_t + r));
    let chol =
        linalg::cholesky(&s, "innovation covariance").map_err(|_| Error::SingularInnovation)?;
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ.
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let innovation = z - h * &pred.mean;
    let mean = &pred.mean + &gain * innovation;
    let cov = linalg::symmetrize(&(&pred.cov - &gain * s * gain.transpose()));
    Ok(KalmanGain { mean, cov })
}

fn check_measurement(z: &DVector<f64>, h: &DMatrix<f64>, n: usize) -> Result<()> {
    if h.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h.ncols(),
        });
    }
    if z.len() != h.nrows() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: z.len(),
        });
    }
    Ok(())
}

/// Variational update of a Gaussian / inverse-Wishart prediction.
///
/// The degree grows by one; then `iterations` fixed-point passes alternate a
/// Kalman update with `R̂ = Σ / (ν − 2m − 2)` and a scale update
/// `Σ = Σ⁻ + (z − H x̂)(z − H x̂)ᵀ + H P Hᵀ`. The likelihood is the
/// predictive density with `R` replaced by the predicted mean.
pub fn vb_measurement_update(
    pred: &GiwEstimate,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    iterations: usize,
) -> Result<MeasurementUpdate<GiwEstimate>> {
    if iterations < 1 {
        return Err(Error::InvalidParameter(
            "at least one VB iteration is required".into(),
        ));
    }
    check_measurement(z, h, pred.gaussian.dim())?;
    let prior_iw = pred
        .iw
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("VB update needs an inverse-Wishart part".into()))?;
    let m = prior_iw.dim();
    if h.nrows() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: h.nrows(),
        });
    }
    let offset = 2.0 * m as f64 + 2.0;
    let prior_mean = prior_iw.mean()?;

    let predicted_z = h * &pred.gaussian.mean;
    let predictive_cov =
        linalg::symmetrize(&(h * &pred.gaussian.cov * h.transpose() + &prior_mean));
    let log_likelihood =
        gaussian_logpdf(&predicted_z, &predictive_cov, z).map_err(|_| Error::SingularInnovation)?;

    let degree = prior_iw.degree() + 1.0;
    let mut scale = prior_iw.scale().clone();
    let mut state = pred.gaussian.clone();
    for _ in 0..iterations {
        let r_hat = &scale / (degree - offset);
        let upd = kalman_correct(&pred.gaussian, z, h, &r_hat)?;
        let resid = z - h * &upd.mean;
        scale = linalg::symmetrize(
            &(prior_iw.scale() + &resid * resid.transpose() + h * &upd.cov * h.transpose()),
        );
        state = GaussianEstimate {
            mean: upd.mean,
            cov: upd.cov,
        };
    }
    Ok(MeasurementUpdate {
        estimate: GiwEstimate {
            gaussian: state,
            iw: Some(InverseWishart::new(degree, scale)?),
        },
        log_likelihood,
    })
}

/// Kalman update with a known measurement covariance.
pub fn kf_measurement_update(
    pred: &GaussianEstimate,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<MeasurementUpdate<GaussianEstimate>> {
    check_measurement(z, h, pred.dim())?;
    let predicted_z = h * &pred.mean;
    let predictive_cov = linalg::symmetrize(&(h * &pred.cov * h.transpose() + r));
    let log_likelihood =
        gaussian_logpdf(&predicted_z, &predictive_cov, z).map_err(|_| Error::SingularInnovation)?;
    let upd = kalman_correct(pred, z, h, r)?;
    Ok(MeasurementUpdate {
        estimate: GaussianEstimate {
            mean: upd.mean,
            cov: upd.cov,
        },
        log_likelihood,
    })
}

/// `μ_j ∝ Λ_j Σ_l π_lj μ_l`.
pub fn update_mode_probabilities(
    likelihoods: &[f64],
    chain: &MarkovChain,
    mode_probs: &[f64],
) -> Result<Vec<f64>> {
    if likelihoods.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidParameter(
            "likelihoods must be finite and nonnegative".into(),
        ));
    }
    let logs: Vec<f64> = likelihoods.iter().map(|l| l.ln()).collect();
    update_mode_probabilities_log(&logs, chain, mode_probs)
}

/// Log-domain form of [`update_mode_probabilities`]; the likelihoods are
/// rescaled by their maximum before exponentiation.
pub fn update_mode_probabilities_log(
    log_likelihoods: &[f64],
    chain: &MarkovChain,
    mode_probs: &[f64],
) -> Result<Vec<f64>> {
    let m = chain.modes();
    if log_likelihoods.len() != m || mode_probs.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: log_likelihoods.len().min(mode_probs.len()),
        });
    }
    let max = log_likelihoods
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::LikelihoodUnderflow);
    }
    let unnorm: Vec<f64> = (0..m)
        .map(|j| {
            let predicted: f64 = (0..m).map(|l| chain.prob(l, j) * mode_probs[l]).sum();
            (log_likelihoods[j] - max).exp() * predicted
        })
        .collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) {
        return Err(Error::LikelihoodUnderflow);
    }
    Ok(unnorm.into_iter().map(|u| u / total).collect())
}

fn apply_floor(probs: Vec<f64>, floor: f64) -> Vec<f64> {
    if floor <= 0.0 {
        return probs;
    }
    normalized(probs.into_iter().map(|p| p.max(floor)).collect())
}

/// Fused output of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub fused_state: GaussianEstimate,
    /// Point estimate of the measurement-noise covariance.
    pub fused_r: DMatrix<f64>,
    /// Fused inverse-Wishart, absent for [`Variant::KnownR`].
    pub fused_iw: Option<InverseWishart>,
    pub mode_probs: Vec<f64>,
    pub per_mode: ModeBank,
}

pub fn fuse_output(bank: &ModeBank, cfg: &FilterConfig) -> Result<StepOutput> {
    let weights = normalized(bank.mode_probs.clone());
    let gaussians: Vec<_> = bank.estimates.iter().map(|e| e.gaussian.clone()).collect();
    let fused_state =
        fusion::moment_match_gaussians(&WeightedComponents::new(weights.clone(), gaussians)?)?;
    let (fused_r, fused_iw) = match cfg.variant {
        Variant::KnownR => (
            cfg.known_r.clone().ok_or_else(|| {
                Error::Config("filters.known_r is required by the KNOWN_R variant".into())
            })?,
            None,
        ),
        Variant::Kl => {
            let fused = fusion::kl_fuse_iw(&WeightedComponents::new(weights, iw_parts(bank)?)?)?;
            (fused.mean()?, Some(fused))
        }
        Variant::Mm => {
            let wc = WeightedComponents::new(weights, iw_parts(bank)?)?;
            let fused = fusion::mm_fuse_iw_with(&wc, cfg.degree_rule)?;
            (fusion::iw_mixture_mean(&wc)?, Some(fused))
        }
    };
    Ok(StepOutput {
        fused_state,
        fused_r,
        fused_iw,
        mode_probs: bank.mode_probs.clone(),
        per_mode: bank.clone(),
    })
}

/// Runs one full cycle on measurement `z` and returns the posterior bank and
/// the fused output.
pub fn imm_step(
    bank: &ModeBank,
    model: &JumpMarkovModel,
    z: &DVector<f64>,
    cfg: &FilterConfig,
) -> Result<(ModeBank, StepOutput)> {
    let m = model.num_modes();
    if bank.num_modes() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: bank.num_modes(),
        });
    }
    let mixing = mixing_probabilities(&model.chain, &bank.mode_probs)?;
    let mixed = mix_states(bank, &mixing, cfg.variant, cfg.degree_rule)?;

    let mut estimates = Vec::with_capacity(m);
    let mut log_liks = Vec::with_capacity(m);
    for (est, mode) in mixed.iter().zip(&model.modes) {
        let pred = time_update(est, mode, cfg.forgetting)?;
        match cfg.variant {
            Variant::KnownR => {
                let r = cfg.known_r.as_ref().ok_or_else(|| {
                    Error::Config("filters.known_r is required by the KNOWN_R variant".into())
                })?;
                let upd = kf_measurement_update(&pred.gaussian, z, &model.measurement, r)?;
                log_liks.push(upd.log_likelihood);
                estimates.push(GiwEstimate {
                    gaussian: upd.estimate,
                    iw: None,
                });
            }
            Variant::Kl | Variant::Mm => {
                let upd = vb_measurement_update(&pred, z, &model.measurement, cfg.vb_iterations)?;
                log_liks.push(upd.log_likelihood);
                estimates.push(upd.estimate);
            }
        }
    }
    if cfg.equalize_degrees && cfg.variant.is_adaptive() {
        equalize_degrees(&mut estimates)?;
    }

    let probs = update_mode_probabilities_log(&log_liks, &model.chain, &bank.mode_probs)?;
    let next = ModeBank {
        estimates,
        mode_probs: apply_floor(probs, cfg.prob_floor),
    };
    let out = fuse_output(&next, cfg)?;
    Ok((next, out))
}

fn equalize_degrees(estimates: &mut [GiwEstimate]) -> Result<()> {
    let degrees: Vec<f64> = estimates
        .iter()
        .filter_map(|e| e.iw.as_ref().map(InverseWishart::degree))
        .collect();
    let mean = degrees.iter().sum::<f64>() / degrees.len() as f64;
    for e in estimates.iter_mut() {
        if let Some(iw) = e.iw.take() {
            e.iw = Some(InverseWishart::new(mean, iw.scale().clone())?);
        }
    }
    Ok(())
}

/// Convenience wrapper holding the model, configuration and current bank.
#[derive(Debug, Clone)]
pub struct ImmFilter {
    pub model: JumpMarkovModel,
    pub config: FilterConfig,
    pub bank: ModeBank,
}

impl ImmFilter {
    pub fn new(model: JumpMarkovModel, config: FilterConfig, bank: ModeBank) -> Result<Self> {
        config.validate()?;
        if bank.num_modes() != model.num_modes() {
            return Err(Error::DimensionMismatch {
                expected: model.num_modes(),
                got: bank.num_modes(),
            });
        }
        Ok(Self {
            model,
            config,
            bank,
        })
    }

    pub fn step(&mut self, z: &DVector<f64>) -> Result<StepOutput> {
        let (bank, out) = imm_step(&self.bank, &self.model, z, &self.config)?;
        self.bank = bank;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ct_scenario, TruthConfig};

    fn scalar_gauss(mean: f64, var: f64) -> GaussianEstimate {
        GaussianEstimate::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
        .unwrap()
    }

    fn diag2(v: f64) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * v
    }

    fn three_mode_chain() -> MarkovChain {
        MarkovChain::uniform_switching(3, 0.8).unwrap()
    }

    fn giw2(mean: [f64; 4], nu: f64, s: f64) -> GiwEstimate {
        GiwEstimate {
            gaussian: GaussianEstimate::new(
                DVector::from_row_slice(&mean),
                DMatrix::identity(4, 4) * 5.0,
            )
            .unwrap(),
            iw: Some(InverseWishart::new(nu, diag2(s)).unwrap()),
        }
    }

    #[test]
    fn mixing_with_uniform_probabilities() {
        let chain = three_mode_chain();
        let mix = mixing_probabilities(&chain, &[1.0 / 3.0; 3]).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert!((mix.weights[(i, j)] - chain.prob(i, j)).abs() < 1e-15);
            }
            assert!((mix.predicted[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((mix.weights[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mixing_identity_and_point_mass() {
        let id = MarkovChain::new(DMatrix::identity(3, 3)).unwrap();
        let mix = mixing_probabilities(&id, &[0.2, 0.5, 0.3]).unwrap();
        assert_eq!(mix.weights, DMatrix::identity(3, 3));

        let mix = mixing_probabilities(&three_mode_chain(), &[1.0, 0.0, 0.0]).unwrap();
        for j in 0..3 {
            assert_eq!(mix.column(j), vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn mixing_unreachable_mode() {
        let id = MarkovChain::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(
            mixing_probabilities(&id, &[1.0, 0.0, 0.0]),
            Err(Error::DegenerateMode(1))
        );
    }

    #[test]
    fn mix_identical_estimates_is_identity() {
        let e = giw2([1.0, 2.0, 3.0, 4.0], 20.0, 50.0);
        let bank = ModeBank::uniform(e.clone(), 3).unwrap();
        let mix = mixing_probabilities(&three_mode_chain(), &bank.mode_probs).unwrap();
        for variant in [Variant::Kl, Variant::Mm] {
            for out in mix_states(&bank, &mix, variant, DegreeRule::Average).unwrap() {
                assert!((out.gaussian.mean.clone() - &e.gaussian.mean).amax() < 1e-12);
                assert!((out.gaussian.cov.clone() - &e.gaussian.cov).amax() < 1e-12);
                let iw = out.iw.unwrap();
                assert!((iw.degree() - 20.0).abs() < 1e-12);
                assert!((iw.scale() - diag2(50.0)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_inverse_wishart_arithmetic() {
        let bank = ModeBank::new(
            vec![giw2([0.0; 4], 20.0, 50.0), giw2([0.0; 4], 30.0, 100.0)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mix = Mixing {
            weights: DMatrix::from_element(2, 2, 0.5),
            predicted: vec![0.5, 0.5],
        };
        let out = mix_states(&bank, &mix, Variant::Kl, DegreeRule::Average).unwrap();
        let iw = out[0].iw.as_ref().unwrap();
        assert!((iw.degree() - 25.0).abs() < 1e-12);
        assert!((iw.scale() - diag2(75.0)).amax() < 1e-12);
    }

    #[test]
    fn mix_kl_equals_mm_for_equal_degrees() {
        let bank = ModeBank::new(
            vec![
                giw2([0.0, 1.0, 0.0, 1.0], 24.0, 50.0),
                giw2([3.0, 1.0, -2.0, 1.0], 24.0, 120.0),
                giw2([1.0, 0.0, 5.0, 2.0], 24.0, 77.0),
            ],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let mix = mixing_probabilities(&three_mode_chain(), &bank.mode_probs).unwrap();
        let kl = mix_states(&bank, &mix, Variant::Kl, DegreeRule::Average).unwrap();
        let mm = mix_states(&bank, &mix, Variant::Mm, DegreeRule::Average).unwrap();
        assert_eq!(kl, mm);
    }

    #[test]
    fn time_update_without_forgetting_keeps_iw() {
        let model = build_ct_scenario(&TruthConfig::default()).unwrap();
        let e = giw2([0.0, 10.0, 0.0, 10.0], 23.0, 80.0);
        let pred = time_update(&e, &model.modes[0], 1.0).unwrap();
        assert_eq!(pred.iw, e.iw);
    }

    #[test]
    fn time_update_forgetting_preserves_mean() {
        let model = build_ct_scenario(&TruthConfig::default()).unwrap();
        let e = giw2([0.0, 10.0, 0.0, 10.0], 23.0, 80.0);
        for rho in [0.3, 0.9, 0.99] {
            let pred = time_update(&e, &model.modes[1], rho).unwrap();
            let before = e.iw.as_ref().unwrap().mean().unwrap();
            let after = pred.iw.unwrap().mean().unwrap();
            assert!((before - after).amax() < 1e-12);
        }
    }

    #[test]
    fn time_update_static_model() {
        let mode = LinearMode::new(
            DMatrix::identity(4, 4),
            DMatrix::identity(4, 4),
            DMatrix::zeros(4, 4),
            0.0,
        )
        .unwrap();
        let e = giw2([1.0, 2.0, 3.0, 4.0], 23.0, 80.0);
        let pred = time_update(&e, &mode, 1.0).unwrap();
        assert_eq!(pred.gaussian, e.gaussian);
    }

    #[test]
    fn vb_update_scalar_worked_example() {
        let pred = GiwEstimate {
            gaussian: scalar_gauss(0.0, 1.0),
            iw: Some(InverseWishart::scalar(6.0, 2.0).unwrap()),
        };
        let h = DMatrix::from_element(1, 1, 1.0);
        let z = DVector::from_element(1, 1.0);

        let one = vb_measurement_update(&pred, &z, &h, 1).unwrap().estimate;
        assert!((one.gaussian.mean[0] - 0.6).abs() < 1e-12);
        assert!((one.gaussian.cov[(0, 0)] - 0.4).abs() < 1e-12);
        assert!((one.iw.as_ref().unwrap().scale()[(0, 0)] - 2.56).abs() < 1e-12);

        let upd = vb_measurement_update(&pred, &z, &h, 2).unwrap();
        let est = upd.estimate;
        let iw = est.iw.unwrap();
        assert_eq!(iw.degree(), 7.0);
        // R̂ = 2.56/3, K = 1/(1 + R̂).
        let gain = 1.0 / (1.0 + 2.56 / 3.0);
        assert!((est.gaussian.mean[0] - gain).abs() < 1e-12);
        assert!((est.gaussian.cov[(0, 0)] - (1.0 - gain)).abs() < 1e-12);
        let sigma2 = 2.0 + (1.0 - gain).powi(2) + (1.0 - gain);
        assert!((iw.scale()[(0, 0)] - sigma2).abs() < 1e-12);
        assert!((iw.scale()[(0, 0)] - 2.672_428_963_3).abs() < 1e-9);
        assert!((est.gaussian.mean[0] - 0.539568).abs() < 1e-6);

        // Λ = N(1; 0, 1 + 2/(6 − 4)) = N(1; 0, 2).
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.25;
        assert!((upd.log_likelihood - expected).abs() < 1e-12);
    }

    #[test]
    fn vb_update_zero_innovation() {
        let pred = giw2([3.0, 1.0, -4.0, 2.0], 21.0, 60.0);
        let h = crate::model::position_measurement();
        let z = &h * &pred.gaussian.mean;
        let upd = vb_measurement_update(&pred, &z, &h, 1).unwrap().estimate;
        assert!((upd.gaussian.mean.clone() - &pred.gaussian.mean).amax() < 1e-12);
        let hph = &h * &upd.gaussian.cov * h.transpose();
        let expect = pred.iw.as_ref().unwrap().scale() + hph;
        assert!((upd.iw.unwrap().scale() - expect).amax() < 1e-12);
    }

    #[test]
    fn vb_update_contracts_covariance() {
        let mut pred = giw2([3.0, 1.0, -4.0, 2.0], 21.0, 60.0);
        pred.gaussian.cov = DMatrix::from_row_slice(
            4,
            4,
            &[
                50.0, 5.0, 1.0, 0.0, 5.0, 8.0, 0.0, 0.5, 1.0, 0.0, 40.0, 4.0, 0.0, 0.5, 4.0, 9.0,
            ],
        );
        let h = crate::model::position_measurement();
        let z = DVector::from_vec(vec![10.0, -20.0]);
        let upd = vb_measurement_update(&pred, &z, &h, 3).unwrap().estimate;
        let p = &upd.gaussian.cov;
        assert!(crate::linalg::is_symmetric(p));
        assert!(crate::linalg::min_eigenvalue(p) >= 0.0);
        assert!(crate::linalg::min_eigenvalue(&(&pred.gaussian.cov - p)) >= -1e-10);
    }

    #[test]
    fn vb_update_rejects_bad_input() {
        let pred = giw2([0.0; 4], 21.0, 60.0);
        let h = crate::model::position_measurement();
        assert!(vb_measurement_update(&pred, &DVector::zeros(2), &h, 0).is_err());
        assert!(vb_measurement_update(&pred, &DVector::zeros(3), &h, 1).is_err());
        let no_iw = GiwEstimate {
            iw: None,
            ..pred.clone()
        };
        assert!(vb_measurement_update(&no_iw, &DVector::zeros(2), &h, 1).is_err());
        let low = GiwEstimate {
            iw: Some(InverseWishart::new(5.5, diag2(1.0)).unwrap()),
            ..pred
        };
        assert!(matches!(
            vb_measurement_update(&low, &DVector::zeros(2), &h, 1),
            Err(Error::MeanUndefined { .. })
        ));
    }

    #[test]
    fn kf_update_scalar() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let upd = kf_measurement_update(
            &scalar_gauss(0.0, 1.0),
            &DVector::from_element(1, 2.0),
            &h,
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((upd.estimate.mean[0] - 1.0).abs() < 1e-15);
        assert!((upd.estimate.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kf_update_uninformative_measurement() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let upd = kf_measurement_update(
            &scalar_gauss(3.0, 1.0),
            &DVector::from_element(1, 50.0),
            &h,
            &DMatrix::from_element(1, 1, 1e12),
        )
        .unwrap();
        assert!((upd.estimate.mean[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn kf_likelihood_integrates_to_one() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let pred = scalar_gauss(0.7, 2.0);
        let r = DMatrix::from_element(1, 1, 3.0);
        let f = |z: f64| {
            kf_measurement_update(&pred, &DVector::from_element(1, z), &h, &r)
                .unwrap()
                .likelihood()
        };
        let mass = crate::selfcheck::quad::integrate(f, -60.0, 60.0, 1e-12);
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mode_probabilities_uninformative() {
        let mu =
            update_mode_probabilities(&[0.3; 3], &three_mode_chain(), &[1.0 / 3.0; 3]).unwrap();
        for p in mu {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_probabilities_from_point_mass() {
        let mu =
            update_mode_probabilities(&[1.0; 3], &three_mode_chain(), &[1.0, 0.0, 0.0]).unwrap();
        assert!((mu[0] - 0.8).abs() < 1e-15);
        assert!((mu[1] - 0.1).abs() < 1e-15);
        assert!((mu[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mode_probabilities_scale_invariance() {
        let chain = three_mode_chain();
        let prev = [0.5, 0.3, 0.2];
        let a = update_mode_probabilities(&[0.2, 1.5, 0.01], &chain, &prev).unwrap();
        let b = update_mode_probabilities(&[0.2e6, 1.5e6, 0.01e6], &chain, &prev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_probabilities_underflow() {
        let chain = three_mode_chain();
        assert_eq!(
            update_mode_probabilities(&[0.0; 3], &chain, &[1.0 / 3.0; 3]),
            Err(Error::LikelihoodUnderflow)
        );
        let tiny =
            update_mode_probabilities_log(&[-2000.0, -2001.0, -2500.0], &chain, &[1.0 / 3.0; 3])
                .unwrap();
        assert!((tiny.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(tiny[0] > tiny[1]);
    }

    fn fuse_cfg(variant: Variant) -> FilterConfig {
        FilterConfig::new(variant)
    }

    #[test]
    fn fuse_single_mode() {
        let e = giw2([1.0, 0.0, 2.0, 0.0], 25.0, 90.0);
        let bank = ModeBank::uniform(e.clone(), 1).unwrap();
        let kl = fuse_output(&bank, &fuse_cfg(Variant::Kl)).unwrap();
        let mm = fuse_output(&bank, &fuse_cfg(Variant::Mm)).unwrap();
        assert_eq!(kl.fused_state, e.gaussian);
        assert_eq!(kl.fused_r, e.iw.as_ref().unwrap().mean().unwrap());
        assert_eq!(kl.fused_r, mm.fused_r);
        assert_eq!(kl.fused_iw, mm.fused_iw);
    }

    #[test]
    fn fuse_kl_versus_mm_mean() {
        let bank = ModeBank::new(
            vec![giw2([0.0; 4], 10.0, 4.0), giw2([0.0; 4], 20.0, 14.0)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let kl = fuse_output(&bank, &fuse_cfg(Variant::Kl)).unwrap();
        let mm = fuse_output(&bank, &fuse_cfg(Variant::Mm)).unwrap();
        assert!((kl.fused_r.clone() - diag2(1.0)).amax() < 1e-12);
        assert!((mm.fused_r.clone() - diag2(1.0)).amax() < 1e-12);

        let bank = ModeBank::new(
            vec![giw2([0.0; 4], 10.0, 4.0), giw2([0.0; 4], 20.0, 28.0)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let kl = fuse_output(&bank, &fuse_cfg(Variant::Kl)).unwrap();
        let mm = fuse_output(&bank, &fuse_cfg(Variant::Mm)).unwrap();
        assert!((kl.fused_r.clone() - diag2(16.0 / 9.0)).amax() < 1e-12);
        assert!((mm.fused_r.clone() - diag2(1.5)).amax() < 1e-12);
        assert!((kl.fused_r[(0, 0)] - 1.778).abs() < 1e-3);
    }

    #[test]
    fn fuse_state_second_moment() {
        let bank = ModeBank::new(
            vec![
                giw2([0.0, 1.0, 0.0, 1.0], 24.0, 50.0),
                giw2([3.0, 1.0, -2.0, 1.0], 24.0, 120.0),
                giw2([1.0, 0.0, 5.0, 2.0], 24.0, 77.0),
            ],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let out = fuse_output(&bank, &fuse_cfg(Variant::Kl)).unwrap();
        let mut second = DMatrix::zeros(4, 4);
        for (w, e) in bank.mode_probs.iter().zip(&bank.estimates) {
            let mu = &e.gaussian.mean;
            second += (&e.gaussian.cov + mu * mu.transpose()) * *w;
        }
        let x = &out.fused_state.mean;
        let fused_second = &out.fused_state.cov + x * x.transpose();
        assert!((fused_second - second).amax() < 1e-12);
    }

    #[test]
    fn known_r_output() {
        let start = GaussianEstimate::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
        let r = crate::model::true_measurement_cov(200.0);
        let cfg = FilterConfig::known(r.clone());
        let bank = ModeBank::uniform(cfg.initial_estimate(start).unwrap(), 3).unwrap();
        let out = fuse_output(&bank, &cfg).unwrap();
        assert_eq!(out.fused_r, r);
        assert!(out.fused_iw.is_none());
    }

    #[test]
    fn single_mode_step_is_predict_then_update() {
        let cfg_truth = TruthConfig {
            turn_rates: vec![0.0],
            initial_mode: 0,
            ..TruthConfig::default()
        };
        let model = build_ct_scenario(&cfg_truth).unwrap();
        let z = DVector::from_vec(vec![14.0, 7.0]);
        let start = GaussianEstimate::new(
            DVector::from_vec(vec![0.0, 10.0, 0.0, 10.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 10.0, 100.0, 10.0])),
        )
        .unwrap();
        for variant in Variant::ALL {
            let mut cfg = FilterConfig::new(variant);
            if variant == Variant::KnownR {
                cfg.known_r = Some(crate::model::true_measurement_cov(200.0));
            }
            let init = cfg.initial_estimate(start.clone()).unwrap();
            let bank = ModeBank::uniform(init.clone(), 1).unwrap();
            let (next, out) = imm_step(&bank, &model, &z, &cfg).unwrap();
            let pred = time_update(&init, &model.modes[0], 1.0).unwrap();
            let direct = match variant {
                Variant::KnownR => GiwEstimate {
                    gaussian: kf_measurement_update(
                        &pred.gaussian,
                        &z,
                        &model.measurement,
                        cfg.known_r.as_ref().unwrap(),
                    )
                    .unwrap()
                    .estimate,
                    iw: None,
                },
                _ => {
                    vb_measurement_update(&pred, &z, &model.measurement, 2)
                        .unwrap()
                        .estimate
                }
            };
            assert!(
                (next.estimates[0].gaussian.mean.clone() - &direct.gaussian.mean).amax() < 1e-12
            );
            assert!((next.estimates[0].gaussian.cov.clone() - &direct.gaussian.cov).amax() < 1e-12);
            assert!((out.fused_state.mean.clone() - &direct.gaussian.mean).amax() < 1e-12);
            if let Some(iw) = &direct.iw {
                let got = next.estimates[0].iw.as_ref().unwrap();
                assert!((got.degree() - iw.degree()).abs() < 1e-12);
                assert!((got.scale() - iw.scale()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::new(Variant::Kl);
        assert!(cfg.validate().is_ok());
        cfg.vb_iterations = 0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("filters.nc"));
        let mut cfg = FilterConfig::new(Variant::Kl);
        cfg.prior_degree = 6.0;
        assert!(cfg.validate().is_err());
        let cfg = FilterConfig::new(Variant::KnownR);
        assert!(cfg.validate().is_err());
        let mut cfg = FilterConfig::new(Variant::Mm);
        cfg.forgetting = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert!("XX".parse::<Variant>().is_err());
    }
}
