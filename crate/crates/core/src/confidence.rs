//! Confidence radii and a Monte-Carlo check of the vector Freedman bound.
//!
//! All logarithms are natural.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_delta, Error, Result};
use crate::linalg::PsdAccumulator;

/// `2^{-ell}` for a 1-based layer index.
#[inline]
pub fn layer_scale(ell: usize) -> f64 {
    2f64.powi(-(ell as i32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernsteinRadiusInput {
    /// Upper bound on `||x_k||_{Z_{k-1}^{-1}}` over the whole sequence.
    pub rho: f64,
    /// Cumulative conditional variance bound `v_k`.
    pub v: f64,
    /// Almost-sure bound on the noise.
    pub big_r: f64,
    pub k: u64,
    pub delta: f64,
}

/// `beta_k = 16 rho sqrt(v_k log(4k^2/delta)) + 6 rho R log(4k^2/delta)`.
pub fn bernstein_radius(input: &BernsteinRadiusInput) -> Result<f64> {
    check_delta(input.delta)?;
    if !(input.rho > 0.0) {
        return Err(Error::param("rho", "must be > 0"));
    }
    if !(input.v >= 0.0) {
        return Err(Error::param("v", "must be >= 0"));
    }
    if !(input.big_r > 0.0) {
        return Err(Error::param("big_r", "must be > 0"));
    }
    if input.k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    let k = input.k as f64;
    let log = (4.0 * k * k / input.delta).ln();
    Ok(16.0 * input.rho * (input.v * log).sqrt() + 6.0 * input.rho * input.big_r * log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaveRadiusInput {
    pub ell: usize,
    pub k: u64,
    pub big_l: usize,
    pub delta: f64,
    pub big_r: f64,
    /// Variance proxy already chosen by [`varhat_branch`].
    pub varhat: f64,
    pub psi_count: u64,
}

fn check_layer(ell: usize, big_l: usize) -> Result<()> {
    if ell == 0 || ell > big_l {
        return Err(Error::param(
            "ell",
            format!("layer {ell} outside [1, {big_l}]"),
        ));
    }
    Ok(())
}

/// Bandit radius for round `k + 1` at layer `ell`:
///
/// ```text
/// 16 2^-l sqrt((8 Var + 6 R^2 log(4(k+1)^2 L/d) + 2^{-2l+4}) log(4k^2 L/d))
///   + 6 2^-l R log(4k^2 L/d) + 2^{-l+1}
/// ```
pub fn save_radius(input: &SaveRadiusInput) -> Result<f64> {
    check_delta(input.delta)?;
    check_layer(input.ell, input.big_l)?;
    if !(input.varhat >= 0.0) {
        return Err(Error::param("varhat", "must be >= 0"));
    }
    if !(input.big_r > 0.0) {
        return Err(Error::param("big_r", "must be > 0"));
    }
    if input.k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    let k = input.k as f64;
    let l = input.big_l as f64;
    let scale = layer_scale(input.ell);
    let log_k = (4.0 * k * k * l / input.delta).ln();
    let log_next = (4.0 * (k + 1.0) * (k + 1.0) * l / input.delta).ln();
    let r2 = input.big_r * input.big_r;
    let inner = 8.0 * input.varhat + 6.0 * r2 * log_next + 16.0 * scale * scale;
    Ok(16.0 * scale * (inner * log_k).sqrt() + 6.0 * scale * input.big_r * log_k + 2.0 * scale)
}

/// Whether layer `ell` is deep enough for the plug-in variance estimate at round `k + 1`.
pub fn save_plugin_active(ell: usize, k: u64, big_l: usize, delta: f64) -> bool {
    let kn = (k + 1) as f64;
    let threshold = 64.0 * (4.0 * kn * kn * big_l as f64 / delta).ln().sqrt();
    2f64.powi(ell as i32) >= threshold
}

/// Selects the variance proxy used by [`save_radius`]: the weighted residual
/// sum on deep layers, `R^2 |Psi|` otherwise.
pub fn varhat_branch(
    ell: usize,
    k: u64,
    big_l: usize,
    delta: f64,
    big_r: f64,
    weighted_sq_residuals: f64,
    psi_count: u64,
) -> f64 {
    if save_plugin_active(ell, k, big_l, delta) {
        weighted_sq_residuals
    } else {
        big_r * big_r * psi_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpRadiusInput {
    pub ell: usize,
    pub k: u64,
    pub big_l: usize,
    pub delta: f64,
    pub big_h: usize,
    pub lambda: f64,
    pub big_b: f64,
    pub varhat: f64,
    pub psi_count: u64,
}

fn mdp_log(k: u64, big_h: usize, big_l: usize, delta: f64) -> f64 {
    let k = k as f64;
    let h = big_h as f64;
    (4.0 * k * k * h * h * big_l as f64 / delta).ln()
}

/// Radius of the value-targeted regression ellipsoid for episode `k`:
///
/// ```text
/// 16 2^-l sqrt((8 Var + 8 log(4k^2H^2L/d) + 2^{-2l+5} lambda B^2) log(4k^2H^2L/d))
///   + 6 2^-l log(4k^2H^2L/d) + 2^-l sqrt(lambda) B
/// ```
pub fn mdp_radius(input: &MdpRadiusInput) -> Result<f64> {
    check_delta(input.delta)?;
    check_layer(input.ell, input.big_l)?;
    if !(input.varhat >= 0.0) {
        return Err(Error::param("varhat", "must be >= 0"));
    }
    if !(input.lambda > 0.0) {
        return Err(Error::param("lambda", "must be > 0"));
    }
    if !(input.big_b > 0.0) {
        return Err(Error::param("big_b", "must be > 0"));
    }
    if input.k == 0 || input.big_h == 0 {
        return Err(Error::param("k", "episode and horizon must be >= 1"));
    }
    let log = mdp_log(input.k, input.big_h, input.big_l, input.delta);
    let scale = layer_scale(input.ell);
    let lb2 = input.lambda * input.big_b * input.big_b;
    let inner = 8.0 * input.varhat + 8.0 * log + 32.0 * scale * scale * lb2;
    Ok(16.0 * scale * (inner * log).sqrt()
        + 6.0 * scale * log
        + scale * input.lambda.sqrt() * input.big_b)
}

pub fn mdp_plugin_active(ell: usize, k: u64, big_h: usize, big_l: usize, delta: f64) -> bool {
    let threshold = 64.0 * mdp_log(k, big_h, big_l, delta).sqrt();
    2f64.powi(ell as i32) >= threshold
}

/// MDP variance proxy: `leading_factor * residuals` on deep layers, `|Psi|` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn mdp_varhat_branch(
    ell: usize,
    k: u64,
    big_h: usize,
    big_l: usize,
    delta: f64,
    leading_factor: f64,
    weighted_sq_residuals: f64,
    psi_count: u64,
) -> f64 {
    if mdp_plugin_active(ell, k, big_h, big_l, delta) {
        leading_factor * weighted_sq_residuals
    } else {
        psi_count as f64
    }
}

/// Scalar Freedman bound `sqrt(2 v log(1/delta)) + (2/3) M log(1/delta)`.
pub fn freedman_radius(v: f64, m: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(v >= 0.0) {
        return Err(Error::param("v", "must be >= 0"));
    }
    if !(m > 0.0) {
        return Err(Error::param("m", "must be > 0"));
    }
    let log = (1.0 / delta).ln();
    Ok((2.0 * v * log).sqrt() + 2.0 / 3.0 * m * log)
}

// ---------------------------------------------------------------------------
// Monte-Carlo falsifier
// ---------------------------------------------------------------------------

/// How the falsifier draws the feature sequence `x_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureMode {
    /// Uniform on the unit sphere; `rho = 1/sqrt(lambda)`.
    Sphere,
    /// Always the first basis vector; with `dim = 1` this is the scalar case.
    FixedAxis,
    /// Random direction rescaled so that `||x_k||_{Z_{k-1}^{-1}} = rho` exactly.
    Normalized { rho: f64 },
}

/// Two-point noise `+-sigma_k`, with `sigma_k` drawn uniformly from `sigmas`
/// before the sign is drawn (so the conditional variance is known exactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigmas: Vec<f64>,
    pub big_r: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.big_r.is_finite() && self.big_r > 0.0) {
            return Err(Error::param(
                "big_r",
                "noise needs a finite positive almost-sure bound",
            ));
        }
        if self.sigmas.is_empty() {
            return Err(Error::param("sigmas", "at least one noise level required"));
        }
        for &s in &self.sigmas {
            if !(0.0..=self.big_r).contains(&s) {
                return Err(Error::param(
                    "sigmas",
                    format!("level {s} outside [0, R = {}]", self.big_r),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalsifierConfig {
    pub dim: usize,
    pub steps: usize,
    pub trials: usize,
    pub delta: f64,
    pub lambda: f64,
    pub noise: NoiseSpec,
    pub features: FeatureMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    /// First step `k` at which the bound failed, if any.
    pub first_violation_step: Option<usize>,
    /// `sup_k ||sum x_i eta_i||_{Z_k^{-1}} / beta_k`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub outcomes: Vec<TrialOutcome>,
    pub violation_fraction: f64,
    /// `delta + 3 sqrt(delta (1 - delta) / T)`.
    pub allowed_fraction: f64,
}

impl CoverageReport {
    pub fn within_contract(&self) -> bool {
        self.violation_fraction <= self.allowed_fraction
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "first_violation_step", "max_ratio"])?;
        for o in &self.outcomes {
            let step = o
                .first_violation_step
                .map_or_else(|| "-1".to_string(), |s| s.to_string());
            w.write_record([o.trial.to_string(), step, o.max_ratio.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-trial generator: one ChaCha stream per trial, so results do not
/// depend on how trials are scheduled across threads.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Runs `trials` independent martingale sequences of length `steps` and
/// records, per trial, whether `||sum_i x_i eta_i||_{Z_k^{-1}} <= beta_k`
/// held simultaneously for every `k`.
pub fn martingale_falsifier(cfg: &FalsifierConfig) -> Result<CoverageReport> {
    check_delta(cfg.delta)?;
    cfg.noise.validate()?;
    if cfg.dim == 0 || cfg.steps == 0 || cfg.trials == 0 {
        return Err(Error::param("dim", "dim, steps and trials must be >= 1"));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::param("lambda", "must be > 0"));
    }
    let rho = match cfg.features {
        FeatureMode::Sphere | FeatureMode::FixedAxis => 1.0 / cfg.lambda.sqrt(),
        FeatureMode::Normalized { rho } => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::param("rho", "must be finite and > 0"));
            }
            rho
        }
    };

    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, rho, trial))
        .collect::<Result<Vec<_>>>()?;

    let violations = outcomes
        .iter()
        .filter(|o| o.first_violation_step.is_some())
        .count();
    let t = cfg.trials as f64;
    Ok(CoverageReport {
        outcomes,
        violation_fraction: violations as f64 / t,
        allowed_fraction: cfg.delta + 3.0 * (cfg.delta * (1.0 - cfg.delta) / t).sqrt(),
    })
}

fn run_trial(cfg: &FalsifierConfig, rho: f64, trial: usize) -> Result<TrialOutcome> {
    let mut rng = trial_rng(cfg.seed, trial);
    // The moment vector of this accumulator is exactly sum_i x_i eta_i.
    let mut acc = PsdAccumulator::new(cfg.dim, cfg.lambda)?;
    let mut axis = DVector::zeros(cfg.dim);
    axis[0] = 1.0;
    let mut v = 0.0;
    let mut first_violation_step = None;
    let mut max_ratio: f64 = 0.0;

    for k in 1..=cfg.steps {
        let sigma = cfg.noise.sigmas[rng.random_range(0..cfg.noise.sigmas.len())];
        let x = match cfg.features {
            FeatureMode::Sphere => unit_direction(&mut rng, cfg.dim),
            FeatureMode::FixedAxis => axis.clone(),
            FeatureMode::Normalized { rho } => {
                let u = unit_direction(&mut rng, cfg.dim);
                let n = acc.elliptical_norm(&u);
                u * (rho / n)
            }
        };
        let eta = if rng.random_bool(0.5) { sigma } else { -sigma };
        // The accumulator caps weights at 1; feed w = 1 and carry the scale in x.
        acc.rank_one_update(1.0, &x, eta)?;
        v += sigma * sigma;

        let lhs = acc.elliptical_norm(acc.moment());
        let beta = bernstein_radius(&BernsteinRadiusInput {
            rho,
            v,
            big_r: cfg.noise.big_r,
            k: k as u64,
            delta: cfg.delta,
        })?;
        let ratio = lhs / beta;
        max_ratio = max_ratio.max(ratio);
        if ratio > 1.0 && first_violation_step.is_none() {
            first_violation_step = Some(k);
        }
    }
    Ok(TrialOutcome {
        trial,
        first_violation_step,
        max_ratio,
    })
}
