//! Tabular linear mixture MDPs, exact dynamic-programming oracles and the
//! layered value-targeted learner [`UcrlAve`].
//!
//! The transition kernel is `P = sum_j theta*_j P_j` for known basis kernels
//! `P_j` and an unknown simplex vector `theta*`. Features are scaled by
//! `1/sqrt(d)` so that `||phi_V(s, a)|| <= 1` for every `V` with values in
//! `[0, 1]`; the matching parameter is `sqrt(d) theta*` with norm bound
//! `B = sqrt(d)`.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::bandit::{layer_count, run_rng};
use crate::confidence::{layer_scale, mdp_radius, mdp_varhat_branch, MdpRadiusInput};
use crate::error::{check_delta, Error, Result};
use crate::linalg::PsdAccumulator;

const ROW_TOL: f64 = 1e-12;
const VALUE_TOL: f64 = 1e-12;
/// Tolerance on the weight law `||w phi||_{Sigma^{-1}} = 2^{-ell}`.
pub const WEIGHT_LAW_TOL: f64 = 1e-9;
/// Slack on the optimism comparison `V_{k,1}(s_1) >= V*_1(s_1)`.
pub const OPTIMISM_TOL: f64 = 1e-9;

/// How the reward table is paid out along an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `r(s, a) <= 1/H` collected at every step.
    #[default]
    PerStep,
    /// `r(s, a) <= 1` collected only at the last step.
    Terminal,
}

/// Raw description of an instance, validated by [`MixtureMdp::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `basis[j][(s * A + a) * S + s']`.
    pub basis: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
    /// `reward[s * A + a]`.
    pub reward: Vec<f64>,
    #[serde(default)]
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub start_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMdp {
    spec: MdpSpec,
    mixed: Vec<f64>,
    feature_scale: f64,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::param(
            "basis",
            format!("{what}: negative or non-finite entry"),
        ));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::param("basis", format!("{what}: row sums to {sum}")));
    }
    Ok(())
}

impl MixtureMdp {
    pub fn new(spec: MdpSpec) -> Result<Self> {
        let (s_n, a_n, d) = (spec.n_states, spec.n_actions, spec.basis.len());
        if s_n == 0 || a_n == 0 || spec.horizon == 0 || d == 0 {
            return Err(Error::param("mdp", "S, A, H and d must all be >= 1"));
        }
        if spec.theta_star.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: spec.theta_star.len(),
            });
        }
        if spec.theta_star.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::param("theta_star", "entries must be >= 0"));
        }
        let tsum: f64 = spec.theta_star.iter().sum();
        if (tsum - 1.0).abs() > ROW_TOL {
            return Err(Error::param(
                "theta_star",
                format!("must sum to 1, sums to {tsum}"),
            ));
        }
        for (j, kernel) in spec.basis.iter().enumerate() {
            if kernel.len() != s_n * a_n * s_n {
                return Err(Error::DimensionMismatch {
                    expected: s_n * a_n * s_n,
                    actual: kernel.len(),
                });
            }
            for (sa, row) in kernel.chunks(s_n).enumerate() {
                check_row(
                    row,
                    &format!("kernel {j}, (s, a) = ({}, {})", sa / a_n, sa % a_n),
                )?;
            }
        }
        if spec.reward.len() != s_n * a_n {
            return Err(Error::DimensionMismatch {
                expected: s_n * a_n,
                actual: spec.reward.len(),
            });
        }
        let cap = match spec.reward_mode {
            RewardMode::PerStep => 1.0 / spec.horizon as f64,
            RewardMode::Terminal => 1.0,
        };
        if spec.reward.iter().any(|&r| !(r >= 0.0 && r <= cap)) {
            return Err(Error::param(
                "reward",
                format!("entries must lie in [0, {cap}]"),
            ));
        }
        if spec.start_state >= s_n {
            return Err(Error::param("start_state", "out of range"));
        }

        let mut mixed = vec![0.0; s_n * a_n * s_n];
        for (kernel, &t) in spec.basis.iter().zip(&spec.theta_star) {
            for (m, p) in mixed.iter_mut().zip(kernel) {
                *m += t * p;
            }
        }
        Ok(MixtureMdp {
            feature_scale: 1.0 / (d as f64).sqrt(),
            spec,
            mixed,
        })
    }

    /// Basis rows drawn uniformly from the simplex, rewards uniform on `[0, 1/H]`,
    /// `theta*` uniform on the simplex.
    pub fn random(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let basis = (0..dim)
            .map(|_| {
                (0..n_states * n_actions)
                    .flat_map(|_| simplex_point(rng, n_states))
                    .collect()
            })
            .collect();
        let reward = (0..n_states * n_actions)
            .map(|_| rng.random_range(0.0..=1.0) / horizon as f64)
            .collect();
        MixtureMdp::new(MdpSpec {
            n_states,
            n_actions,
            horizon,
            basis,
            theta_star: simplex_point(rng, dim),
            reward,
            reward_mode: RewardMode::PerStep,
            start_state: 0,
        })
    }

    /// A chain where action 0 drifts left and action 1 swims right. Basis
    /// kernel `j` makes swimming succeed with probability `1 / (j + 1)`,
    /// otherwise the swimmer stays put or slips back. The right end pays `1/H`,
    /// the left end a small distractor reward.
    pub fn river_swim(n_states: usize, horizon: usize, theta_star: Vec<f64>) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::param(
                "n_states",
                "river swim needs at least 2 states",
            ));
        }
        let d = theta_star.len();
        let idx = |s: usize, a: usize, t: usize| (s * 2 + a) * n_states + t;
        let basis = (0..d)
            .map(|j| {
                let up = 1.0 / (j + 1) as f64;
                let mut k = vec![0.0; n_states * 2 * n_states];
                for s in 0..n_states {
                    k[idx(s, 0, s.saturating_sub(1))] += 1.0;
                    let right = (s + 1).min(n_states - 1);
                    let left = s.saturating_sub(1);
                    let rest = 1.0 - up;
                    k[idx(s, 1, right)] += up;
                    k[idx(s, 1, s)] += 0.75 * rest;
                    k[idx(s, 1, left)] += 0.25 * rest;
                }
                k
            })
            .collect();
        let h = horizon as f64;
        let mut reward = vec![0.0; n_states * 2];
        reward[0] = 0.05 / h;
        reward[(n_states - 1) * 2 + 1] = 1.0 / h;
        MixtureMdp::new(MdpSpec {
            n_states,
            n_actions: 2,
            horizon,
            basis,
            theta_star,
            reward,
            reward_mode: RewardMode::PerStep,
            start_state: 0,
        })
    }

    /// Every basis kernel is a point mass on a random successor and
    /// `theta* = e_1`, so the mixed dynamics are deterministic.
    pub fn deterministic(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let basis = (0..dim)
            .map(|_| {
                let mut k = vec![0.0; n_states * n_actions * n_states];
                for sa in 0..n_states * n_actions {
                    k[sa * n_states + rng.random_range(0..n_states)] = 1.0;
                }
                k
            })
            .collect();
        let reward = (0..n_states * n_actions)
            .map(|_| rng.random_range(0.0..=1.0) / horizon as f64)
            .collect();
        let mut theta_star = vec![0.0; dim];
        theta_star[0] = 1.0;
        MixtureMdp::new(MdpSpec {
            n_states,
            n_actions,
            horizon,
            basis,
            theta_star,
            reward,
            reward_mode: RewardMode::PerStep,
            start_state: 0,
        })
    }

    /// Same dynamics, but the only reward is `value` for ending in `goal`.
    pub fn with_goal_reward(&self, goal: usize, value: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        if goal >= spec.n_states {
            return Err(Error::param("goal", "out of range"));
        }
        spec.reward = vec![0.0; spec.n_states * spec.n_actions];
        for a in 0..spec.n_actions {
            spec.reward[goal * spec.n_actions + a] = value;
        }
        spec.reward_mode = RewardMode::Terminal;
        MixtureMdp::new(spec)
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.spec.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn dim(&self) -> usize {
        self.spec.basis.len()
    }

    pub fn start_state(&self) -> usize {
        self.spec.start_state
    }

    /// `B = sqrt(d)`.
    pub fn big_b(&self) -> f64 {
        (self.dim() as f64).sqrt()
    }

    /// `sqrt(d) theta*`, the parameter matching the scaled features.
    pub fn theta_eff(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.spec.theta_star.iter().map(|t| t / self.feature_scale),
        )
    }

    /// Reward of `(s, a)` at 0-based step `h`.
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        match self.spec.reward_mode {
            RewardMode::Terminal if h + 1 != self.spec.horizon => 0.0,
            _ => self.spec.reward[s * self.spec.n_actions + a],
        }
    }

    /// Mixed transition row `P(. | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.spec.n_states;
        let start = (s * self.spec.n_actions + a) * n;
        &self.mixed[start..start + n]
    }

    pub fn basis_row(&self, j: usize, s: usize, a: usize) -> &[f64] {
        let n = self.spec.n_states;
        let start = (s * self.spec.n_actions + a) * n;
        &self.spec.basis[j][start..start + n]
    }

    fn check_value(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.spec.n_states {
            return Err(Error::DimensionMismatch {
                expected: self.spec.n_states,
                actual: v.len(),
            });
        }
        if v.iter()
            .any(|&x| !(-VALUE_TOL..=1.0 + VALUE_TOL).contains(&x))
        {
            return Err(Error::param("V", "values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `phi_V(s, a) = (1/sqrt(d)) (sum_s' P_j(s'|s,a) V(s'))_j`.
    pub fn phi_v(&self, s: usize, a: usize, v: &[f64]) -> Result<DVector<f64>> {
        self.check_value(v)?;
        Ok(self.phi_v_unchecked(s, a, v))
    }

    fn phi_v_unchecked(&self, s: usize, a: usize, v: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| {
            self.feature_scale * dot(self.basis_row(j, s, a), v)
        })
    }

    /// `[P V](s, a)` on the mixed kernel.
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        dot(self.row(s, a), v)
    }

    /// `[P V^2](s, a) - ([P V](s, a))^2`.
    pub fn conditional_variance(&self, s: usize, a: usize, v: &[f64]) -> Result<f64> {
        self.check_value(v)?;
        let row = self.row(s, a);
        let m1 = dot(row, v);
        let m2: f64 = row.iter().zip(v).map(|(p, x)| p * x * x).sum();
        let var = m2 - m1 * m1;
        if var < -1e-12 {
            return Err(Error::Internal(format!(
                "conditional variance negative: {var}"
            )));
        }
        Ok(var.max(0.0))
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut impl Rng) -> usize {
        let row = self.row(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (t, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = t;
                if u < acc {
                    return t;
                }
            }
        }
        last
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn simplex_point(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let sum: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    // push the rounding residue into the largest entry so the row sums to 1
    let resid = 1.0 - p.iter().sum::<f64>();
    let big = (0..n).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    p[big] += resid;
    p
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Value tables for one episode, indexed by 0-based step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    n_actions: usize,
    /// `q[h][s * A + a]` for `h < H`.
    pub q: Vec<Vec<f64>>,
    /// `v[h][s]` for `h <= H`; `v[H] = 0`.
    pub v: Vec<Vec<f64>>,
    /// `policy[h][s]`.
    pub policy: Vec<Vec<usize>>,
    /// Cached `phi_{V_{h+1}}(s, a)`, present for planned tables.
    phi: Option<Vec<Vec<DVector<f64>>>>,
}

impl ValueTables {
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[h][s * self.n_actions + a]
    }

    pub fn action(&self, h: usize, s: usize) -> usize {
        self.policy[h][s]
    }

    pub fn phi(&self, h: usize, s: usize, a: usize) -> Option<&DVector<f64>> {
        self.phi.as_ref().map(|p| &p[h][s * self.n_actions + a])
    }
}

/// Optimal values by backward induction on the mixed kernel.
pub fn exact_dp(mdp: &MixtureMdp) -> ValueTables {
    let (sn, an, hn) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut v = vec![vec![0.0; sn]; hn + 1];
    let mut q = vec![vec![0.0; sn * an]; hn];
    let mut policy = vec![vec![0; sn]; hn];
    for h in (0..hn).rev() {
        for s in 0..sn {
            for a in 0..an {
                q[h][s * an + a] = mdp.reward(h, s, a) + mdp.expect(s, a, &v[h + 1]);
            }
            let row = &q[h][s * an..(s + 1) * an];
            let best = argmax_first(row);
            policy[h][s] = best;
            v[h][s] = row[best];
        }
    }
    ValueTables {
        n_actions: an,
        q,
        v,
        policy,
        phi: None,
    }
}

/// Exact values `V^pi_h` of a deterministic Markov policy `policy[h][s]`.
pub fn evaluate_policy(mdp: &MixtureMdp, policy: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let (sn, hn) = (mdp.n_states(), mdp.horizon());
    let mut v = vec![vec![0.0; sn]; hn + 1];
    for h in (0..hn).rev() {
        for s in 0..sn {
            let a = policy[h][s];
            v[h][s] = mdp.reward(h, s, a) + mdp.expect(s, a, &v[h + 1]);
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Learner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcrlAveConfig {
    pub alpha: f64,
    pub delta: f64,
    pub lambda: f64,
    pub big_b: f64,
    /// Multiplier on the residual sum in the plug-in variance branch.
    pub leading_factor: f64,
}

impl UcrlAveConfig {
    /// `alpha = 1/(KH)^{3/2}`, `B = sqrt(d)`, `lambda = 1/B^2`.
    pub fn for_horizon(big_k: u64, big_h: usize, dim: usize, delta: f64) -> Self {
        let big_b = (dim as f64).sqrt();
        UcrlAveConfig {
            alpha: 1.0 / ((big_k as f64) * big_h as f64).powf(1.5),
            delta,
            lambda: 1.0 / (big_b * big_b),
            big_b,
            leading_factor: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpLayer {
    pub acc: PsdAccumulator,
    /// Estimate refreshed at episode start.
    pub theta_hat: DVector<f64>,
    pub beta_hat: f64,
    pub sum_w2y2: f64,
    pub sum_w2y_phi: DVector<f64>,
    /// Weighted squared residuals against `theta_hat`, refreshed at episode start.
    pub residual_sum: f64,
}

impl MdpLayer {
    pub fn psi_count(&self) -> u64 {
        self.acc.count()
    }
}

/// Outcome of one acting step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub action: usize,
    pub next_state: usize,
    /// Layer that received the sample, `None` when every layer is already confident.
    pub layer: Option<usize>,
    pub weight: Option<f64>,
    /// Regression target `V_{k,h+1}(s_{h+1})`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcrlAve {
    cfg: UcrlAveConfig,
    dim: usize,
    big_h: usize,
    big_l: usize,
    layers: Vec<MdpLayer>,
    /// Planning snapshot `Sigma_{k,1,l}^{-1}` norms are taken against these.
    start_accs: Vec<PsdAccumulator>,
    episode: u64,
}

impl UcrlAve {
    pub fn new(dim: usize, big_h: usize, cfg: UcrlAveConfig) -> Result<Self> {
        check_delta(cfg.delta)?;
        if !(cfg.lambda > 0.0) || !(cfg.big_b > 0.0) {
            return Err(Error::param("lambda", "lambda and B must be > 0"));
        }
        if !(cfg.leading_factor > 0.0) {
            return Err(Error::param("leading_factor", "must be > 0"));
        }
        if big_h == 0 {
            return Err(Error::param("horizon", "must be >= 1"));
        }
        let big_l = layer_count(cfg.alpha)?;
        let mut layers = Vec::with_capacity(big_l);
        for ell in 1..=big_l {
            let scale = layer_scale(ell);
            layers.push(MdpLayer {
                acc: PsdAccumulator::new(dim, scale * scale * cfg.lambda)?,
                theta_hat: DVector::zeros(dim),
                beta_hat: 0.0,
                sum_w2y2: 0.0,
                sum_w2y_phi: DVector::zeros(dim),
                residual_sum: 0.0,
            });
        }
        let mut me = UcrlAve {
            cfg,
            dim,
            big_h,
            big_l,
            start_accs: layers.iter().map(|l| l.acc.clone()).collect(),
            layers,
            episode: 1,
        };
        me.refresh_radii(1)?;
        Ok(me)
    }

    pub fn config(&self) -> &UcrlAveConfig {
        &self.cfg
    }

    pub fn big_l(&self) -> usize {
        self.big_l
    }

    pub fn layers(&self) -> &[MdpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MdpLayer] {
        &mut self.layers
    }

    /// 1-based index of the episode about to be planned.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn psi_counts(&self) -> Vec<u64> {
        self.layers.iter().map(MdpLayer::psi_count).collect()
    }

    fn refresh_radii(&mut self, k: u64) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let ell = i + 1;
            let psi = layer.acc.count();
            let varhat = mdp_varhat_branch(
                ell,
                k,
                self.big_h,
                self.big_l,
                self.cfg.delta,
                self.cfg.leading_factor,
                layer.residual_sum,
                psi,
            );
            layer.beta_hat = mdp_radius(&MdpRadiusInput {
                ell,
                k,
                big_l: self.big_l,
                delta: self.cfg.delta,
                big_h: self.big_h,
                lambda: self.cfg.lambda,
                big_b: self.cfg.big_b,
                varhat,
                psi_count: psi,
            })?;
        }
        Ok(())
    }

    /// Optimistic backward induction with the episode-start estimates.
    pub fn plan(&self, mdp: &MixtureMdp) -> Result<ValueTables> {
        if mdp.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: mdp.dim(),
            });
        }
        if mdp.horizon() != self.big_h {
            return Err(Error::param(
                "horizon",
                "learner and instance disagree on H",
            ));
        }
        let (sn, an, hn) = (mdp.n_states(), mdp.n_actions(), self.big_h);
        let mut v = vec![vec![0.0; sn]; hn + 1];
        let mut q = vec![vec![0.0; sn * an]; hn];
        let mut policy = vec![vec![0; sn]; hn];
        let mut phi = vec![Vec::with_capacity(sn * an); hn];
        for h in (0..hn).rev() {
            for s in 0..sn {
                for a in 0..an {
                    let f = mdp.phi_v_unchecked(s, a, &v[h + 1]);
                    let r = mdp.reward(h, s, a);
                    let mut best = f64::INFINITY;
                    for (layer, start) in self.layers.iter().zip(&self.start_accs) {
                        let bracket = r
                            + layer.theta_hat.dot(&f)
                            + layer.beta_hat * start.elliptical_norm(&f);
                        best = best.min(bracket);
                    }
                    q[h][s * an + a] = best.clamp(0.0, 1.0);
                    phi[h].push(f);
                }
                let row = &q[h][s * an..(s + 1) * an];
                let best = argmax_first(row);
                policy[h][s] = best;
                v[h][s] = row[best];
            }
        }
        Ok(ValueTables {
            n_actions: an,
            q,
            v,
            policy,
            phi: Some(phi),
        })
    }

    /// Acts at 0-based step `h` from state `s` and routes the sample to its layer.
    pub fn step(
        &mut self,
        mdp: &MixtureMdp,
        tables: &ValueTables,
        h: usize,
        s: usize,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome> {
        let action = tables.action(h, s);
        let next_state = mdp.sample_next(s, action, rng);
        let phi = tables
            .phi(h, s, action)
            .ok_or_else(|| Error::param("tables", "acting requires planned tables"))?;
        let target = tables.v[h + 1][next_state];

        let mut chosen = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let ell = i + 1;
            let norm = layer.acc.elliptical_norm(phi);
            if norm >= layer_scale(ell) && norm > 0.0 {
                chosen = Some((ell, norm));
                break;
            }
        }
        let Some((ell, norm)) = chosen else {
            return Ok(StepOutcome {
                action,
                next_state,
                layer: None,
                weight: None,
                target,
            });
        };
        let scale = layer_scale(ell);
        let w = scale / norm;
        let layer = &mut self.layers[ell - 1];
        let inserted = w * layer.acc.elliptical_norm(phi);
        if (inserted - scale).abs() > WEIGHT_LAW_TOL {
            return Err(Error::Internal(format!(
                "weight law broken at layer {ell}: ||w phi|| = {inserted}, want {scale}"
            )));
        }
        layer.acc.rank_one_update(w, phi, target)?;
        let w2 = w * w;
        layer.sum_w2y2 += w2 * target * target;
        layer.sum_w2y_phi.axpy(w2 * target, phi, 1.0);
        Ok(StepOutcome {
            action,
            next_state,
            layer: Some(ell),
            weight: Some(w),
            target,
        })
    }

    /// Closes episode `k`: refreshes estimates, plug-in variances and radii for `k + 1`.
    pub fn episode_end(&mut self, k: u64) -> Result<()> {
        if k != self.episode {
            return Err(Error::param(
                "k",
                format!("closing episode {k} but episode {} is open", self.episode),
            ));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.theta_hat = layer.acc.solve_theta();
            let raw = layer.sum_w2y2 - 2.0 * layer.theta_hat.dot(&layer.sum_w2y_phi)
                + layer.acc.quadratic_form_data(&layer.theta_hat)?;
            if raw < -1e-9 {
                return Err(Error::Internal(format!(
                    "plug-in variance negative at layer {}: {raw}",
                    i + 1
                )));
            }
            layer.residual_sum = raw.max(0.0);
        }
        self.start_accs = self.layers.iter().map(|l| l.acc.clone()).collect();
        self.episode = k + 1;
        self.refresh_radii(k + 1)
    }

    /// Whether `theta_eff` lies in every layer's ellipsoid.
    pub fn covers(&self, theta_eff: &DVector<f64>) -> bool {
        self.layers
            .iter()
            .zip(&self.start_accs)
            .all(|(l, acc)| acc.gram_norm(&(&l.theta_hat - theta_eff)) <= l.beta_hat)
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Something that plans a policy each episode and learns from its steps.
pub trait MdpLearner: Send {
    fn name(&self) -> &str;
    fn plan(&self, mdp: &MixtureMdp) -> Result<ValueTables>;
    fn step(
        &mut self,
        mdp: &MixtureMdp,
        tables: &ValueTables,
        h: usize,
        s: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<StepOutcome>;
    fn episode_end(&mut self, k: u64) -> Result<()>;
    fn psi_counts(&self) -> Vec<u64> {
        Vec::new()
    }
}

impl MdpLearner for UcrlAve {
    fn name(&self) -> &str {
        "ucrl_ave"
    }

    fn plan(&self, mdp: &MixtureMdp) -> Result<ValueTables> {
        UcrlAve::plan(self, mdp)
    }

    fn step(
        &mut self,
        mdp: &MixtureMdp,
        tables: &ValueTables,
        h: usize,
        s: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<StepOutcome> {
        UcrlAve::step(self, mdp, tables, h, s, rng)
    }

    fn episode_end(&mut self, k: u64) -> Result<()> {
        UcrlAve::episode_end(self, k)
    }

    fn psi_counts(&self) -> Vec<u64> {
        UcrlAve::psi_counts(self)
    }
}

/// Follows the optimal policy of the true instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicy {
    tables: ValueTables,
}

impl OptimalPolicy {
    pub fn new(mdp: &MixtureMdp) -> Self {
        OptimalPolicy {
            tables: exact_dp(mdp),
        }
    }
}

impl MdpLearner for OptimalPolicy {
    fn name(&self) -> &str {
        "optimal"
    }

    fn plan(&self, _mdp: &MixtureMdp) -> Result<ValueTables> {
        Ok(self.tables.clone())
    }

    fn step(
        &mut self,
        mdp: &MixtureMdp,
        tables: &ValueTables,
        h: usize,
        s: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<StepOutcome> {
        let action = tables.action(h, s);
        let next_state = mdp.sample_next(s, action, rng);
        Ok(StepOutcome {
            action,
            next_state,
            layer: None,
            weight: None,
            target: tables.v[h + 1][next_state],
        })
    }

    fn episode_end(&mut self, _k: u64) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub k: u64,
    pub regret: f64,
    pub cum_regret: f64,
    /// Running `sum_k sum_h [Var V*_{h+1}](s_h^k, a_h^k)`.
    pub var_k_star_cum: f64,
    /// `V_{k,1}(s_1) >= V*_1(s_1) - 1e-9`.
    pub optimism_flag: bool,
    /// Per-layer sample counts after the episode.
    pub layer_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpRun {
    pub learner: String,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
}

impl MdpRun {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn regret_at(&self, k: u64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.records[(k as usize).min(self.records.len()) - 1].cum_regret
    }

    pub fn var_k_star(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.var_k_star_cum)
    }

    pub fn optimism_violation_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.optimism_flag).count() as f64 / self.records.len() as f64
    }

    pub fn psi_counts(&self) -> Vec<u64> {
        self.records
            .last()
            .map(|r| r.layer_counts.clone())
            .unwrap_or_default()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MDP_CSV_HEADER)?;
        for r in &self.records {
            let counts: Vec<String> = r.layer_counts.iter().map(u64::to_string).collect();
            w.write_record([
                r.k.to_string(),
                r.regret.to_string(),
                r.cum_regret.to_string(),
                r.var_k_star_cum.to_string(),
                r.optimism_flag.to_string(),
                counts.join(";"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub const MDP_CSV_HEADER: [&str; 6] = [
    "k",
    "regret",
    "cum_regret",
    "var_k_star_cum",
    "optimism_flag",
    "layer_counts",
];

/// Runs `big_k` episodes from the designated start state. Regret is
/// `V*_1(s_1) - V^{pi_k}_1(s_1)` by exact policy evaluation.
pub fn run_mdp(
    mdp: &MixtureMdp,
    learner: &mut dyn MdpLearner,
    big_k: u64,
    seed: u64,
) -> Result<MdpRun> {
    let mut rng = run_rng(seed);
    let star = exact_dp(mdp);
    let s1 = mdp.start_state();
    let mut records = Vec::with_capacity(big_k as usize);
    let (mut cum, mut var_cum) = (0.0, 0.0);
    for k in 1..=big_k {
        let tables = learner.plan(mdp)?;
        let v_pi = evaluate_policy(mdp, &tables.policy);
        let regret = star.v[0][s1] - v_pi[0][s1];
        let optimism_flag = tables.v[0][s1] >= star.v[0][s1] - OPTIMISM_TOL;

        let mut s = s1;
        for h in 0..mdp.horizon() {
            let out = learner.step(mdp, &tables, h, s, &mut rng)?;
            var_cum += mdp.conditional_variance(s, out.action, &star.v[h + 1])?;
            s = out.next_state;
        }
        learner.episode_end(k)?;

        cum += regret;
        records.push(EpisodeRecord {
            k,
            regret,
            cum_regret: cum,
            var_k_star_cum: var_cum,
            optimism_flag,
            layer_counts: learner.psi_counts(),
        });
    }
    Ok(MdpRun {
        learner: learner.name().to_string(),
        seed,
        records,
    })
}

/// Logarithmic count cap without the per-layer potential factor:
/// `2 d log(1 + K H / (2^{-2l} d lambda))`.
pub fn psi_cap_literal(dim: usize, ell: usize, big_k: u64, big_h: usize, lambda: f64) -> f64 {
    let d = dim as f64;
    let s = layer_scale(ell);
    2.0 * d * (1.0 + big_k as f64 * big_h as f64 / (s * s * d * lambda)).ln()
}

/// Cap implied by the elliptical potential lemma with the `4^{-l}` per-insertion
/// potential accounted for: `4^l` times [`psi_cap_literal`].
pub fn psi_cap(dim: usize, ell: usize, big_k: u64, big_h: usize, lambda: f64) -> f64 {
    4f64.powi(ell as i32) * psi_cap_literal(dim, ell, big_k, big_h, lambda)
}
