//! Heteroscedastic linear bandits: environments, the layered variance-adaptive
//! learner ([`SaveLearner`]), OFUL-style baselines and the regret runner.

use std::borrow::Cow;
use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confidence::{layer_scale, save_radius, varhat_branch, SaveRadiusInput};
use crate::error::{check_delta, Error, Result};
use crate::linalg::PsdAccumulator;

/// Tolerance on the weight law `||w a||_{Sigma^{-1}} = 2^{-ell}`.
pub const WEIGHT_LAW_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VarianceSchedule {
    Constant {
        sigma: f64,
    },
    /// `sigma_k = values[(k - 1) % values.len()]`.
    Alternating {
        values: Vec<f64>,
    },
    /// `first` for rounds `k < switch_round`, `second` afterwards.
    TwoPhase {
        first: f64,
        second: f64,
        switch_round: u64,
    },
}

impl VarianceSchedule {
    pub fn sigma(&self, k: u64) -> f64 {
        match self {
            VarianceSchedule::Constant { sigma } => *sigma,
            VarianceSchedule::Alternating { values } => {
                values[((k.max(1) - 1) % values.len() as u64) as usize]
            }
            VarianceSchedule::TwoPhase {
                first,
                second,
                switch_round,
            } => {
                if k < *switch_round {
                    *first
                } else {
                    *second
                }
            }
        }
    }

    fn levels(&self) -> Vec<f64> {
        match self {
            VarianceSchedule::Constant { sigma } => vec![*sigma],
            VarianceSchedule::Alternating { values } => values.clone(),
            VarianceSchedule::TwoPhase { first, second, .. } => vec![*first, *second],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    /// `+-sigma_k` with equal probability: exact variance, bound `sigma_k`.
    #[default]
    TwoPoint,
    /// `N(0, sigma_k^2)` truncated to `[-R, R]` by rejection. The realized
    /// variance is slightly below `sigma_k^2`.
    TruncatedGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArmSet {
    /// The same decision set every round.
    Fixed(Vec<DVector<f64>>),
    /// `n` fresh uniform draws from the unit sphere every round.
    FreshSphere { n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub theta_star: DVector<f64>,
    pub arms: ArmSet,
    pub schedule: VarianceSchedule,
    pub noise: NoiseLaw,
    pub big_r: f64,
    pub big_k: u64,
    /// Bound `A` on arm norms.
    pub arm_bound: f64,
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

impl BanditInstance {
    fn validated(self) -> Result<Self> {
        let dim = self.theta_star.len();
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        if self.theta_star.norm() > 1.0 + 1e-12 {
            return Err(Error::param("theta_star", "norm must be <= 1"));
        }
        if !(self.big_r > 0.0 && self.big_r.is_finite()) {
            return Err(Error::param("big_r", "must be finite and > 0"));
        }
        if self.big_k == 0 {
            return Err(Error::param("big_k", "must be >= 1"));
        }
        for s in self.schedule.levels() {
            if !(0.0..=self.big_r).contains(&s) {
                return Err(Error::param(
                    "sigma",
                    format!("level {s} outside [0, R = {}]", self.big_r),
                ));
            }
        }
        if let VarianceSchedule::Alternating { values } = &self.schedule {
            if values.is_empty() {
                return Err(Error::param("sigma", "alternating schedule needs values"));
            }
        }
        match &self.arms {
            ArmSet::Fixed(arms) => {
                if arms.is_empty() {
                    return Err(Error::EmptyDecisionSet);
                }
                for a in arms {
                    if a.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            actual: a.len(),
                        });
                    }
                    if a.norm() > self.arm_bound + 1e-12 {
                        return Err(Error::param("arms", "arm exceeds the norm bound A"));
                    }
                    if a.dot(&self.theta_star).abs() > 1.0 + 1e-12 {
                        return Err(Error::param("arms", "mean reward outside [-1, 1]"));
                    }
                }
            }
            ArmSet::FreshSphere { n } => {
                if *n == 0 {
                    return Err(Error::EmptyDecisionSet);
                }
                if self.arm_bound < 1.0 {
                    return Err(Error::param("arms", "sphere arms need A >= 1"));
                }
            }
        }
        Ok(self)
    }

    /// `n` unit arms drawn once; `theta_star` uniform on the sphere of radius `theta_norm`.
    pub fn fixed_sphere(
        dim: usize,
        n: usize,
        theta_norm: f64,
        schedule: VarianceSchedule,
        big_r: f64,
        big_k: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        let theta_star = random_unit(rng, dim) * theta_norm;
        let arms = (0..n).map(|_| random_unit(rng, dim)).collect();
        BanditInstance {
            theta_star,
            arms: ArmSet::Fixed(arms),
            schedule,
            noise: NoiseLaw::TwoPoint,
            big_r,
            big_k,
            arm_bound: 1.0,
        }
        .validated()
    }

    pub fn fresh_sphere(
        dim: usize,
        n: usize,
        theta_norm: f64,
        schedule: VarianceSchedule,
        big_r: f64,
        big_k: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be >= 1"));
        }
        BanditInstance {
            theta_star: random_unit(rng, dim) * theta_norm,
            arms: ArmSet::FreshSphere { n },
            schedule,
            noise: NoiseLaw::TwoPoint,
            big_r,
            big_k,
            arm_bound: 1.0,
        }
        .validated()
    }

    /// Two unit arms with mean rewards `1` and `1 - gap`; `theta_star = e_1`.
    pub fn two_arm(
        dim: usize,
        gap: f64,
        schedule: VarianceSchedule,
        big_r: f64,
        big_k: u64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::param("dim", "two-arm instance needs dim >= 2"));
        }
        if !(gap > 0.0 && gap <= 2.0) {
            return Err(Error::param("gap", "must lie in (0, 2]"));
        }
        let mut theta_star = DVector::zeros(dim);
        theta_star[0] = 1.0;
        let mut worse = DVector::zeros(dim);
        worse[0] = 1.0 - gap;
        worse[1] = (1.0 - (1.0 - gap) * (1.0 - gap)).max(0.0).sqrt();
        BanditInstance {
            arms: ArmSet::Fixed(vec![theta_star.clone(), worse]),
            theta_star,
            schedule,
            noise: NoiseLaw::TwoPoint,
            big_r,
            big_k,
            arm_bound: 1.0,
        }
        .validated()
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn sigma(&self, k: u64) -> f64 {
        self.schedule.sigma(k)
    }

    pub fn decision_set(&self, rng: &mut impl Rng) -> Cow<'_, [DVector<f64>]> {
        match &self.arms {
            ArmSet::Fixed(arms) => Cow::Borrowed(arms),
            ArmSet::FreshSphere { n } => {
                Cow::Owned((0..*n).map(|_| random_unit(rng, self.dim())).collect())
            }
        }
    }

    /// `r = <theta*, a> + eps`, `E[eps] = 0`, `E[eps^2] = sigma_k^2`, `|eps| <= R`.
    pub fn sample_reward(&self, k: u64, arm: &DVector<f64>, rng: &mut impl Rng) -> Result<f64> {
        let sigma = self.sigma(k);
        if sigma > self.big_r {
            return Err(Error::param(
                "sigma",
                format!("sigma_{k} = {sigma} exceeds R = {}", self.big_r),
            ));
        }
        let mean = self.theta_star.dot(arm);
        if sigma == 0.0 {
            return Ok(mean);
        }
        let eps = match self.noise {
            NoiseLaw::TwoPoint => {
                if rng.random_bool(0.5) {
                    sigma
                } else {
                    -sigma
                }
            }
            NoiseLaw::TruncatedGaussian => {
                let normal =
                    Normal::new(0.0, sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
                loop {
                    let e: f64 = normal.sample(rng);
                    if e.abs() <= self.big_r {
                        break e;
                    }
                }
            }
        };
        Ok(mean + eps)
    }
}

// ---------------------------------------------------------------------------
// Learner interface
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Every active arm is certain to within `alpha`: optimistic argmax.
    Exploit,
    /// Some arm is too uncertain at the terminal layer and gets inserted there.
    Explore,
    /// Single-ellipsoid UCB baselines.
    Ucb,
    /// Oracle baseline.
    Oracle,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Exploit => "exploit",
            Branch::Explore => "explore",
            Branch::Ucb => "ucb",
            Branch::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopDescriptor {
    pub branch: Branch,
    /// Layer at which the selection loop stopped (0 for baselines).
    pub layer: usize,
    /// Insertion weight when `branch == Explore`.
    pub weight: Option<f64>,
    /// Indices still active at the terminal layer.
    pub survivors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub arm: usize,
    pub stop: StopDescriptor,
}

/// What the environment reveals to a learner before it acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    pub k: u64,
    /// True noise level; only oracle-variance baselines may read it.
    pub sigma: f64,
}

pub trait BanditLearner: Send {
    fn name(&self) -> &str;
    fn select(&self, ctx: &RoundContext, arms: &[DVector<f64>]) -> Result<Choice>;
    fn update(
        &mut self,
        ctx: &RoundContext,
        arm: &DVector<f64>,
        reward: f64,
        choice: &Choice,
    ) -> Result<()>;
    /// Whether `theta_star` lies in every confidence ellipsoid the learner keeps.
    fn covers(&self, _theta_star: &DVector<f64>) -> bool {
        true
    }
    fn as_save(&self) -> Option<&SaveLearner> {
        None
    }
}

fn check_arms(arms: &[DVector<f64>], dim: usize) -> Result<()> {
    if arms.is_empty() {
        return Err(Error::EmptyDecisionSet);
    }
    for a in arms {
        if a.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("arms", "arm features must be finite"));
        }
    }
    Ok(())
}

/// First index attaining the maximum of `score` (lowest index wins ties).
fn argmax_by<I: IntoIterator<Item = usize>>(idx: I, mut score: impl FnMut(usize) -> f64) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for i in idx {
        let v = score(i);
        if best == usize::MAX || v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Layered variance-adaptive learner
// ---------------------------------------------------------------------------

/// `L = ceil(log2(1/alpha))`, bumped if rounding left `2^{-L} > alpha`, and at least 1.
pub fn layer_count(alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(
            "alpha",
            format!("must be finite and > 0, got {alpha}"),
        ));
    }
    let mut l = (1.0 / alpha).log2().ceil().max(1.0) as usize;
    while layer_scale(l) > alpha {
        l += 1;
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaveConfig {
    pub alpha: f64,
    pub delta: f64,
    pub big_r: f64,
}

impl SaveConfig {
    /// `alpha = 1 / (R K^{3/2})`.
    pub fn for_horizon(big_r: f64, big_k: u64, delta: f64) -> Self {
        SaveConfig {
            alpha: 1.0 / (big_r * (big_k as f64).powf(1.5)),
            delta,
            big_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveLayer {
    pub acc: PsdAccumulator,
    pub theta_hat: DVector<f64>,
    pub beta_hat: f64,
    pub sum_w2r2: f64,
    pub sum_w2ra: DVector<f64>,
    /// Incremental plug-in residual sum, refreshed at every insertion.
    pub residual_sum: f64,
}

impl SaveLayer {
    pub fn psi_count(&self) -> u64 {
        self.acc.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveLearner {
    dim: usize,
    cfg: SaveConfig,
    big_l: usize,
    layers: Vec<SaveLayer>,
    rounds_seen: u64,
}

impl SaveLearner {
    pub fn new(dim: usize, cfg: SaveConfig) -> Result<Self> {
        check_delta(cfg.delta)?;
        if !(cfg.big_r > 0.0 && cfg.big_r.is_finite()) {
            return Err(Error::param("big_r", "must be finite and > 0"));
        }
        let big_l = layer_count(cfg.alpha)?;
        let layers = (1..=big_l)
            .map(|ell| {
                let scale = layer_scale(ell);
                Ok(SaveLayer {
                    acc: PsdAccumulator::new(dim, scale * scale)?,
                    theta_hat: DVector::zeros(dim),
                    beta_hat: 2.0 * scale,
                    sum_w2r2: 0.0,
                    sum_w2ra: DVector::zeros(dim),
                    residual_sum: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SaveLearner {
            dim,
            cfg,
            big_l,
            layers,
            rounds_seen: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &SaveConfig {
        &self.cfg
    }

    pub fn big_l(&self) -> usize {
        self.big_l
    }

    pub fn layers(&self) -> &[SaveLayer] {
        &self.layers
    }

    pub fn layer(&self, ell: usize) -> &SaveLayer {
        &self.layers[ell - 1]
    }

    pub fn rounds_seen(&self) -> u64 {
        self.rounds_seen
    }

    pub fn psi_counts(&self) -> Vec<u64> {
        self.layers.iter().map(SaveLayer::psi_count).collect()
    }

    /// The multi-layer elimination loop.
    pub fn save_select(&self, arms: &[DVector<f64>]) -> Result<Choice> {
        check_arms(arms, self.dim)?;
        let mut active: Vec<usize> = (0..arms.len()).collect();
        for ell in 1..=self.big_l {
            let layer = self.layer(ell);
            let scale = layer_scale(ell);
            let norms: Vec<f64> = active
                .iter()
                .map(|&i| layer.acc.elliptical_norm(&arms[i]))
                .collect();

            if norms.iter().all(|&n| n <= self.cfg.alpha) {
                let pos = argmax_by(0..active.len(), |p| {
                    layer.theta_hat.dot(&arms[active[p]]) + layer.beta_hat * norms[p]
                });
                return Ok(Choice {
                    arm: active[pos],
                    stop: StopDescriptor {
                        branch: Branch::Exploit,
                        layer: ell,
                        weight: None,
                        survivors: active,
                    },
                });
            }

            if norms.iter().all(|&n| n <= scale) {
                let est: Vec<f64> = active
                    .iter()
                    .map(|&i| layer.theta_hat.dot(&arms[i]))
                    .collect();
                let best = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let cut = best - 2.0 * scale * layer.beta_hat;
                active = active
                    .iter()
                    .zip(&est)
                    .filter(|(_, &e)| e >= cut)
                    .map(|(&i, _)| i)
                    .collect();
                continue;
            }

            let pos = argmax_by((0..active.len()).filter(|&p| norms[p] > scale), |p| {
                norms[p]
            });
            return Ok(Choice {
                arm: active[pos],
                stop: StopDescriptor {
                    branch: Branch::Explore,
                    layer: ell,
                    weight: Some(scale / norms[pos]),
                    survivors: active,
                },
            });
        }
        // 2^{-L} <= alpha makes the exploit branch fire no later than layer L.
        Err(Error::Internal(format!(
            "selection loop ran past L = {} layers",
            self.big_l
        )))
    }

    /// Folds the observation for round `k` into the layer the selection stopped at.
    pub fn save_update(
        &mut self,
        k: u64,
        arm: &DVector<f64>,
        reward: f64,
        stop: &StopDescriptor,
    ) -> Result<()> {
        if arm.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: arm.len(),
            });
        }
        if k == 0 {
            return Err(Error::param("k", "rounds start at 1"));
        }
        self.rounds_seen = self.rounds_seen.max(k);
        if stop.branch != Branch::Explore {
            return Ok(());
        }
        let ell = stop.layer;
        if ell == 0 || ell > self.big_l {
            return Err(Error::param(
                "stop.layer",
                format!("layer {ell} out of range"),
            ));
        }
        let w = stop
            .weight
            .ok_or_else(|| Error::param("stop.weight", "explore step without a weight"))?;
        let scale = layer_scale(ell);
        let (big_l, cfg) = (self.big_l, self.cfg);
        let layer = &mut self.layers[ell - 1];

        let inserted_norm = w * layer.acc.elliptical_norm(arm);
        if (inserted_norm - scale).abs() > WEIGHT_LAW_TOL {
            return Err(Error::Internal(format!(
                "weight law broken at layer {ell}: ||w a|| = {inserted_norm}, want {scale}"
            )));
        }

        layer.acc.rank_one_update(w, arm, reward)?;
        layer.theta_hat = layer.acc.solve_theta();
        let w2 = w * w;
        layer.sum_w2r2 += w2 * reward * reward;
        layer.sum_w2ra.axpy(w2 * reward, arm, 1.0);

        let raw = layer.sum_w2r2 - 2.0 * layer.theta_hat.dot(&layer.sum_w2ra)
            + layer.acc.quadratic_form_data(&layer.theta_hat)?;
        if raw < -1e-9 {
            return Err(Error::Internal(format!(
                "plug-in variance negative at layer {ell}: {raw}"
            )));
        }
        layer.residual_sum = raw.max(0.0);
        let psi = layer.acc.count();
        let varhat = varhat_branch(ell, k, big_l, cfg.delta, cfg.big_r, layer.residual_sum, psi);
        layer.beta_hat = save_radius(&SaveRadiusInput {
            ell,
            k,
            big_l,
            delta: cfg.delta,
            big_r: cfg.big_r,
            varhat,
            psi_count: psi,
        })?;
        Ok(())
    }

    pub fn covers_theta(&self, theta_star: &DVector<f64>) -> bool {
        self.layers
            .iter()
            .all(|l| l.acc.gram_norm(&(&l.theta_hat - theta_star)) <= l.beta_hat)
    }

    /// Coverage against the radius built from the true noise levels:
    /// `16 2^-l sqrt(S_l log(4k^2L/d)) + 6 2^-l R log(4k^2L/d) + 2^{-l+1}`
    /// with `S_l = sum_{i in Psi_l} w_i^2 sigma_i^2` supplied by the caller.
    pub fn oracle_covers(
        &self,
        theta_star: &DVector<f64>,
        k: u64,
        oracle_var: &[f64],
    ) -> Option<usize> {
        let kf = k as f64;
        let log = (4.0 * kf * kf * self.big_l as f64 / self.cfg.delta).ln();
        for (i, l) in self.layers.iter().enumerate() {
            let ell = i + 1;
            let scale = layer_scale(ell);
            let s = oracle_var.get(i).copied().unwrap_or(0.0);
            let bound =
                16.0 * scale * (s * log).sqrt() + 6.0 * scale * self.cfg.big_r * log + 2.0 * scale;
            if l.acc.gram_norm(&(&l.theta_hat - theta_star)) > bound {
                return Some(ell);
            }
        }
        None
    }
}

impl BanditLearner for SaveLearner {
    fn name(&self) -> &str {
        "save"
    }

    fn select(&self, _ctx: &RoundContext, arms: &[DVector<f64>]) -> Result<Choice> {
        self.save_select(arms)
    }

    fn update(
        &mut self,
        ctx: &RoundContext,
        arm: &DVector<f64>,
        reward: f64,
        choice: &Choice,
    ) -> Result<()> {
        self.save_update(ctx.k, arm, reward, &choice.stop)
    }

    fn covers(&self, theta_star: &DVector<f64>) -> bool {
        self.covers_theta(theta_star)
    }

    fn as_save(&self) -> Option<&SaveLearner> {
        Some(self)
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfulConfig {
    pub lambda: f64,
    pub delta: f64,
    pub big_r: f64,
    pub arm_bound: f64,
    /// Replaces the computed radius when set.
    pub radius_override: Option<f64>,
}

/// Unweighted ridge regression with the self-normalized radius
/// `R sqrt(d log((1 + t A^2 / lambda) / delta)) + sqrt(lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfulLearner {
    cfg: OfulConfig,
    acc: PsdAccumulator,
    theta_hat: DVector<f64>,
}

impl OfulLearner {
    pub fn new(dim: usize, cfg: OfulConfig) -> Result<Self> {
        check_delta(cfg.delta)?;
        Ok(OfulLearner {
            acc: PsdAccumulator::new(dim, cfg.lambda)?,
            theta_hat: DVector::zeros(dim),
            cfg,
        })
    }

    pub fn radius(&self) -> f64 {
        if let Some(r) = self.cfg.radius_override {
            return r;
        }
        let d = self.acc.dim() as f64;
        let t = self.acc.count() as f64;
        let a2 = self.cfg.arm_bound * self.cfg.arm_bound;
        self.cfg.big_r * (d * ((1.0 + t * a2 / self.cfg.lambda) / self.cfg.delta).ln()).sqrt()
            + self.cfg.lambda.sqrt()
    }

    pub fn accumulator(&self) -> &PsdAccumulator {
        &self.acc
    }
}

fn ucb_choice(
    acc: &PsdAccumulator,
    theta: &DVector<f64>,
    beta: f64,
    arms: &[DVector<f64>],
) -> Choice {
    let arm = argmax_by(0..arms.len(), |i| {
        theta.dot(&arms[i]) + beta * acc.elliptical_norm(&arms[i])
    });
    Choice {
        arm,
        stop: StopDescriptor {
            branch: Branch::Ucb,
            layer: 0,
            weight: None,
            survivors: (0..arms.len()).collect(),
        },
    }
}

impl BanditLearner for OfulLearner {
    fn name(&self) -> &str {
        "oful"
    }

    fn select(&self, _ctx: &RoundContext, arms: &[DVector<f64>]) -> Result<Choice> {
        check_arms(arms, self.acc.dim())?;
        Ok(ucb_choice(&self.acc, &self.theta_hat, self.radius(), arms))
    }

    fn update(
        &mut self,
        _ctx: &RoundContext,
        arm: &DVector<f64>,
        reward: f64,
        _c: &Choice,
    ) -> Result<()> {
        self.acc.rank_one_update(1.0, arm, reward)?;
        self.theta_hat = self.acc.solve_theta();
        Ok(())
    }

    fn covers(&self, theta_star: &DVector<f64>) -> bool {
        self.acc.gram_norm(&(&self.theta_hat - theta_star)) <= self.radius()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedOfulConfig {
    pub lambda: f64,
    pub delta: f64,
    pub arm_bound: f64,
    /// Floor on the noise level used for weighting.
    pub sigma_min: f64,
    pub radius_override: Option<f64>,
}

/// Ridge regression weighted by `1 / max(sigma_k^2, sigma_min^2)` with the
/// true `sigma_k` revealed to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedOfulLearner {
    cfg: WeightedOfulConfig,
    acc: PsdAccumulator,
    theta_hat: DVector<f64>,
}

impl WeightedOfulLearner {
    pub fn new(dim: usize, cfg: WeightedOfulConfig) -> Result<Self> {
        check_delta(cfg.delta)?;
        if !(cfg.sigma_min > 0.0) {
            return Err(Error::param("sigma_min", "must be > 0"));
        }
        Ok(WeightedOfulLearner {
            acc: PsdAccumulator::new(dim, cfg.lambda)?,
            theta_hat: DVector::zeros(dim),
            cfg,
        })
    }

    pub fn sigma_bar(&self, sigma: f64) -> f64 {
        sigma.max(self.cfg.sigma_min)
    }

    /// Self-normalized radius for unit-scale normalized noise.
    pub fn radius(&self) -> f64 {
        if let Some(r) = self.cfg.radius_override {
            return r;
        }
        let d = self.acc.dim() as f64;
        let t = self.acc.count() as f64;
        let a2 = self.cfg.arm_bound * self.cfg.arm_bound;
        let s2 = self.cfg.sigma_min * self.cfg.sigma_min;
        (d * ((1.0 + t * a2 / (s2 * self.cfg.lambda)) / self.cfg.delta).ln()).sqrt()
            + self.cfg.lambda.sqrt()
    }

    pub fn accumulator(&self) -> &PsdAccumulator {
        &self.acc
    }
}

impl BanditLearner for WeightedOfulLearner {
    fn name(&self) -> &str {
        "weighted_oful"
    }

    fn select(&self, _ctx: &RoundContext, arms: &[DVector<f64>]) -> Result<Choice> {
        check_arms(arms, self.acc.dim())?;
        Ok(ucb_choice(&self.acc, &self.theta_hat, self.radius(), arms))
    }

    fn update(
        &mut self,
        ctx: &RoundContext,
        arm: &DVector<f64>,
        reward: f64,
        _c: &Choice,
    ) -> Result<()> {
        // weight 1/sigma_bar^2 on (a, r) is the same as weight 1 on (a, r) / sigma_bar
        let sb = self.sigma_bar(ctx.sigma);
        self.acc.rank_one_update(1.0, &(arm / sb), reward / sb)?;
        self.theta_hat = self.acc.solve_theta();
        Ok(())
    }

    fn covers(&self, theta_star: &DVector<f64>) -> bool {
        self.acc.gram_norm(&(&self.theta_hat - theta_star)) <= self.radius()
    }
}

/// Always plays the best arm under the true parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLearner {
    pub theta_star: DVector<f64>,
}

impl BanditLearner for OracleLearner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn select(&self, _ctx: &RoundContext, arms: &[DVector<f64>]) -> Result<Choice> {
        check_arms(arms, self.theta_star.len())?;
        let arm = argmax_by(0..arms.len(), |i| self.theta_star.dot(&arms[i]));
        Ok(Choice {
            arm,
            stop: StopDescriptor {
                branch: Branch::Oracle,
                layer: 0,
                weight: None,
                survivors: vec![arm],
            },
        })
    }

    fn update(&mut self, _: &RoundContext, _: &DVector<f64>, _: f64, _: &Choice) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RegretRecord {
    pub k: u64,
    pub arm_index: usize,
    pub inst_regret: f64,
    pub cum_regret: f64,
    pub branch: Branch,
    pub layer: usize,
    pub coverage_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub learner: String,
    pub seed: u64,
    pub records: Vec<RegretRecord>,
    /// First `(k, ell)` where the true-variance coverage radius failed (layered learner only).
    pub oracle_coverage_violation: Option<(u64, usize)>,
    /// Rounds in which no optimal arm survived the elimination.
    pub optimal_eliminated_rounds: u64,
    /// Insertion counts per layer at the end of the run (layered learner only).
    pub psi_counts: Vec<u64>,
}

impl BanditRun {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Cumulative regret after round `k` (1-based).
    pub fn regret_at(&self, k: u64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.records[(k as usize).min(self.records.len()) - 1].cum_regret
    }

    pub fn all_covered(&self) -> bool {
        self.records.iter().all(|r| r.coverage_flag)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_regret_csv(&self.records, out)
    }
}

pub const BANDIT_CSV_HEADER: [&str; 7] = [
    "k",
    "arm_index",
    "inst_regret",
    "cum_regret",
    "branch",
    "layer",
    "coverage_flag",
];

pub fn write_regret_csv<W: Write>(records: &[RegretRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BANDIT_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.arm_index.to_string(),
            r.inst_regret.to_string(),
            r.cum_regret.to_string(),
            r.branch.as_str().to_string(),
            r.layer.to_string(),
            r.coverage_flag.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// The per-run generator: ChaCha8 seeded from the run seed.
pub fn run_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plays `inst.big_k` rounds and records regret against the per-round best arm.
pub fn run_bandit(
    inst: &BanditInstance,
    learner: &mut dyn BanditLearner,
    seed: u64,
) -> Result<BanditRun> {
    let mut rng = run_rng(seed);
    let mut records = Vec::with_capacity(inst.big_k as usize);
    let mut cum = 0.0;
    let mut oracle_var: Vec<f64> = Vec::new();
    let mut oracle_violation = None;
    let mut eliminated = 0;

    for k in 1..=inst.big_k {
        let arms = inst.decision_set(&mut rng);
        let means: Vec<f64> = arms.iter().map(|a| inst.theta_star.dot(a)).collect();
        let best = argmax_by(0..arms.len(), |i| means[i]);
        let sigma = inst.sigma(k);
        let ctx = RoundContext { k, sigma };

        let coverage_flag = learner.covers(&inst.theta_star);
        if let Some(save) = learner.as_save() {
            if oracle_violation.is_none() {
                if let Some(ell) = save.oracle_covers(&inst.theta_star, k, &oracle_var) {
                    oracle_violation = Some((k, ell));
                }
            }
        }

        let choice = learner.select(&ctx, &arms)?;
        let arm = &arms[choice.arm];
        if !choice
            .stop
            .survivors
            .iter()
            .any(|&i| means[i] >= means[best])
        {
            eliminated += 1;
        }
        let reward = inst.sample_reward(k, arm, &mut rng)?;
        learner.update(&ctx, arm, reward, &choice)?;

        if let (Branch::Explore, Some(w)) = (choice.stop.branch, choice.stop.weight) {
            let ell = choice.stop.layer;
            if oracle_var.len() < ell {
                oracle_var.resize(ell, 0.0);
            }
            oracle_var[ell - 1] += w * w * sigma * sigma;
        }

        let inst_regret = means[best] - means[choice.arm];
        cum += inst_regret;
        records.push(RegretRecord {
            k,
            arm_index: choice.arm,
            inst_regret,
            cum_regret: cum,
            branch: choice.stop.branch,
            layer: choice.stop.layer,
            coverage_flag,
        });
    }

    Ok(BanditRun {
        learner: learner.name().to_string(),
        seed,
        records,
        oracle_coverage_violation: oracle_violation,
        optimal_eliminated_rounds: eliminated,
        psi_counts: learner
            .as_save()
            .map(SaveLearner::psi_counts)
            .unwrap_or_default(),
    })
}

/// Logarithmic count cap without the per-layer potential factor:
/// `2 d log(1 + 2^{2l} K A^2 / d)`.
pub fn psi_cap_literal(dim: usize, ell: usize, big_k: u64, arm_bound: f64) -> f64 {
    let d = dim as f64;
    2.0 * d * (1.0 + 4f64.powi(ell as i32) * big_k as f64 * arm_bound * arm_bound / d).ln()
}

/// Count cap implied by the elliptical potential lemma: every insertion at
/// layer `l` contributes exactly `4^{-l}` to the potential, so
/// `|Psi_l| <= 4^l * 2 d log(1 + 2^{2l} K A^2 / d)`.
pub fn psi_cap(dim: usize, ell: usize, big_k: u64, arm_bound: f64) -> f64 {
    4f64.powi(ell as i32) * psi_cap_literal(dim, ell, big_k, arm_bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn ctx(k: u64) -> RoundContext {
        RoundContext { k, sigma: 0.0 }
    }

    #[test]
    fn layer_count_covers_alpha() {
        assert_eq!(layer_count(0.1).unwrap(), 4);
        assert_eq!(layer_count(0.25).unwrap(), 2);
        assert_eq!(layer_count(1.0).unwrap(), 1);
        assert_eq!(layer_count(5.0).unwrap(), 1);
        for alpha in [0.3, 1e-3, 1.0 / (20000f64).powf(1.5), 2f64.powi(-20)] {
            let l = layer_count(alpha).unwrap();
            assert!(layer_scale(l) <= alpha);
        }
        assert!(layer_count(0.0).is_err());
    }

    #[test]
    fn learner_initial_state() {
        let s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.1,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        assert_eq!(s.big_l(), 4);
        for ell in 1..=4 {
            let l = s.layer(ell);
            assert_eq!(l.acc.reg(), layer_scale(ell).powi(2));
            assert_eq!(l.beta_hat, 2.0 * layer_scale(ell));
            assert_eq!(l.psi_count(), 0);
        }
    }

    #[test]
    fn first_round_explores_most_uncertain_arm() {
        let s = SaveLearner::new(
            1,
            SaveConfig {
                alpha: 0.1,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        let arms = vec![v(&[0.4]), v(&[1.0])];
        let c = s.save_select(&arms).unwrap();
        assert_eq!(c.arm, 1);
        assert_eq!(c.stop.branch, Branch::Explore);
        assert_eq!(c.stop.layer, 1);
        assert!((c.stop.weight.unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn singleton_with_small_norm_is_exploited() {
        let s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.5,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        // layer-1 gram is I/4, so ||a||_{Sigma^{-1}} = 2 ||a||
        let arms = vec![v(&[0.1, 0.0])];
        let c = s.save_select(&arms).unwrap();
        assert_eq!(c.arm, 0);
        assert_eq!(c.stop.branch, Branch::Exploit);
        assert_eq!(c.stop.layer, 1);
    }

    #[test]
    fn selection_rejects_bad_decision_sets() {
        let s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.1,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        assert!(matches!(s.save_select(&[]), Err(Error::EmptyDecisionSet)));
        assert!(s.save_select(&[v(&[1.0])]).is_err());
        assert!(s.save_select(&[v(&[f64::NAN, 0.0])]).is_err());
    }

    #[test]
    fn exploit_round_leaves_state_untouched() {
        let mut s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.5,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        let arms = vec![v(&[0.1, 0.0])];
        let c = s.save_select(&arms).unwrap();
        let before = s.layers().to_vec();
        s.save_update(1, &arms[0], 0.3, &c.stop).unwrap();
        assert_eq!(s.layers(), &before[..]);
        assert_eq!(s.rounds_seen(), 1);
    }

    #[test]
    fn insertion_at_one_layer_leaves_others_alone() {
        let mut s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.01,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        let a = v(&[0.6, 0.8]);
        let stop = StopDescriptor {
            branch: Branch::Explore,
            layer: 2,
            weight: Some(0.25 / s.layer(2).acc.elliptical_norm(&a)),
            survivors: vec![0],
        };
        let layer1 = s.layer(1).clone();
        s.save_update(1, &a, 0.5, &stop).unwrap();
        assert_eq!(s.layer(1), &layer1);
        assert_eq!(s.layer(2).psi_count(), 1);
        assert_ne!(s.layer(2).beta_hat, 0.5);
    }

    #[test]
    fn update_rejects_broken_weight_law() {
        let mut s = SaveLearner::new(
            2,
            SaveConfig {
                alpha: 0.01,
                delta: 0.05,
                big_r: 1.0,
            },
        )
        .unwrap();
        let stop = StopDescriptor {
            branch: Branch::Explore,
            layer: 1,
            weight: Some(0.9),
            survivors: vec![0],
        };
        assert!(matches!(
            s.save_update(1, &v(&[1.0, 0.0]), 0.1, &stop),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn two_point_noise_moments() {
        let inst =
            BanditInstance::two_arm(2, 0.5, VarianceSchedule::Constant { sigma: 0.3 }, 0.3, 10)
                .unwrap();
        let a = v(&[0.5, 0.5]);
        let mean = inst.theta_star.dot(&a);
        let mut rng = run_rng(1);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| inst.sample_reward(1, &a, &mut rng).unwrap())
            .collect();
        for r in &draws {
            assert!(((r - mean).abs() - 0.3).abs() < 1e-12);
        }
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - mean).abs() <= 3.0 * 0.3 / (n as f64).sqrt());
        assert!((var - 0.09).abs() <= 0.05 * 0.09);
    }

    #[test]
    fn noiseless_reward_is_the_mean() {
        let inst =
            BanditInstance::two_arm(3, 0.2, VarianceSchedule::Constant { sigma: 0.0 }, 1.0, 5)
                .unwrap();
        let mut rng = run_rng(3);
        let a = v(&[0.2, -0.1, 0.4]);
        assert_eq!(inst.sample_reward(2, &a, &mut rng).unwrap(), 0.2);
    }

    #[test]
    fn instance_rejects_sigma_above_r() {
        assert!(BanditInstance::two_arm(
            2,
            0.5,
            VarianceSchedule::Constant { sigma: 0.6 },
            0.5,
            10
        )
        .is_err());
    }

    #[test]
    fn truncated_gaussian_stays_bounded() {
        let mut inst =
            BanditInstance::two_arm(2, 0.5, VarianceSchedule::Constant { sigma: 0.5 }, 0.6, 10)
                .unwrap();
        inst.noise = NoiseLaw::TruncatedGaussian;
        let mut rng = run_rng(9);
        let a = inst.theta_star.clone();
        for _ in 0..10_000 {
            let r = inst.sample_reward(1, &a, &mut rng).unwrap();
            assert!((r - 1.0).abs() <= 0.6);
        }
    }

    #[test]
    fn schedules() {
        let alt = VarianceSchedule::Alternating {
            values: vec![0.1, 0.5],
        };
        assert_eq!(alt.sigma(1), 0.1);
        assert_eq!(alt.sigma(2), 0.5);
        assert_eq!(alt.sigma(3), 0.1);
        let two = VarianceSchedule::TwoPhase {
            first: 0.5,
            second: 0.01,
            switch_round: 10,
        };
        assert_eq!(two.sigma(9), 0.5);
        assert_eq!(two.sigma(10), 0.01);
    }

    #[test]
    fn oful_first_round_and_ties() {
        let o = OfulLearner::new(
            2,
            OfulConfig {
                lambda: 1.0,
                delta: 0.05,
                big_r: 1.0,
                arm_bound: 1.0,
                radius_override: None,
            },
        )
        .unwrap();
        // theta_hat = 0: pure norm maximization
        let arms = vec![v(&[0.3, 0.0]), v(&[0.0, 0.9]), v(&[0.5, 0.5])];
        assert_eq!(o.select(&ctx(1), &arms).unwrap().arm, 1);
        let same = vec![v(&[0.6, 0.8]); 3];
        assert_eq!(o.select(&ctx(1), &same).unwrap().arm, 0);
    }

    #[test]
    fn weighted_oful_floors_noise() {
        let w = WeightedOfulLearner::new(
            2,
            WeightedOfulConfig {
                lambda: 1.0,
                delta: 0.05,
                arm_bound: 1.0,
                sigma_min: 0.01,
                radius_override: None,
            },
        )
        .unwrap();
        assert_eq!(w.sigma_bar(0.0), 0.01);
        assert_eq!(w.sigma_bar(0.3), 0.3);
    }

    #[test]
    fn oracle_learner_has_zero_regret() {
        let mut rng = run_rng(4);
        let inst = BanditInstance::fresh_sphere(
            3,
            10,
            1.0,
            VarianceSchedule::Constant { sigma: 0.2 },
            0.5,
            300,
            &mut rng,
        )
        .unwrap();
        let mut oracle = OracleLearner {
            theta_star: inst.theta_star.clone(),
        };
        let run = run_bandit(&inst, &mut oracle, 8).unwrap();
        assert!(run.records.iter().all(|r| r.inst_regret == 0.0));
        assert_eq!(run.final_regret(), 0.0);
    }

    #[test]
    fn cumulative_column_is_prefix_sum() {
        let mut rng = run_rng(5);
        let inst = BanditInstance::fixed_sphere(
            3,
            8,
            1.0,
            VarianceSchedule::Alternating {
                values: vec![0.1, 0.5],
            },
            0.5,
            400,
            &mut rng,
        )
        .unwrap();
        let mut save = SaveLearner::new(3, SaveConfig::for_horizon(0.5, 400, 0.05)).unwrap();
        let run = run_bandit(&inst, &mut save, 2).unwrap();
        let mut acc = 0.0;
        for r in &run.records {
            acc += r.inst_regret;
            assert_eq!(acc, r.cum_regret);
            assert!(r.inst_regret >= 0.0);
        }
        assert_eq!(acc, run.final_regret());
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,arm_index,inst_regret,cum_regret,branch,layer,coverage_flag\n"));
        assert_eq!(text.lines().count(), 401);
    }

    #[test]
    fn caps_relation() {
        let lit = psi_cap_literal(4, 3, 1000, 1.0);
        assert!((lit - 8.0 * (1.0 + 64.0 * 1000.0 / 4.0f64).ln()).abs() < 1e-12);
        assert_eq!(psi_cap(4, 3, 1000, 1.0), 64.0 * lit);
    }
}
