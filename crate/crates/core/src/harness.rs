//! Experiment configuration, seed sweeps, aggregation and reporting.
//!
//! A sweep runs every `(learner, seed)` pair of a config on a bounded worker
//! pool, writes one CSV per run, then aggregates the runs into `summary.csv`
//! and records what was run in `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{
    self, run_bandit, BanditInstance, BanditLearner, NoiseLaw, OfulConfig, OfulLearner,
    OracleLearner, SaveConfig, SaveLearner, VarianceSchedule, WeightedOfulConfig,
    WeightedOfulLearner,
};
use crate::confidence::{martingale_falsifier, FalsifierConfig, FeatureMode, NoiseSpec};
use crate::error::{check_delta, Error, Result};
use crate::mdp::{
    self, run_mdp, MdpLearner, MdpSpec, MixtureMdp, OptimalPolicy, UcrlAve, UcrlAveConfig,
};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_R: f64 = 1.0;
/// Number of log-spaced rounds used for the final-decade slope fit.
pub const SLOPE_POINTS: usize = 20;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Bandit,
    Mdp,
    Falsifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmSpec {
    FixedSphere { n: usize },
    FreshSphere { n: usize },
    TwoArm { gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditInstanceSpec {
    #[serde(default = "default_arms")]
    pub arms: ArmSpec,
    #[serde(default = "one")]
    pub theta_norm: f64,
    /// Defaults to a constant `sigma = R / 2`.
    #[serde(default)]
    pub schedule: Option<VarianceSchedule>,
    #[serde(default)]
    pub noise: NoiseLaw,
    /// Fixes the instance across seeds; otherwise each seed draws its own.
    #[serde(default)]
    pub instance_seed: Option<u64>,
}

fn default_arms() -> ArmSpec {
    ArmSpec::FixedSphere { n: 20 }
}

fn one() -> f64 {
    1.0
}

impl Default for BanditInstanceSpec {
    fn default() -> Self {
        BanditInstanceSpec {
            arms: default_arms(),
            theta_norm: 1.0,
            schedule: None,
            noise: NoiseLaw::TwoPoint,
            instance_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpModel {
    Random {
        n_states: usize,
        n_actions: usize,
        horizon: usize,
    },
    RiverSwim {
        n_states: usize,
        horizon: usize,
        /// Defaults to the uniform mixture.
        #[serde(default)]
        theta_star: Option<Vec<f64>>,
    },
    Deterministic {
        n_states: usize,
        n_actions: usize,
        horizon: usize,
    },
    Explicit {
        spec: MdpSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub state: usize,
    #[serde(default = "one")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpInstanceSpec {
    pub model: MdpModel,
    /// Replaces the rewards with a single terminal reward.
    #[serde(default)]
    pub goal: Option<GoalSpec>,
    #[serde(default)]
    pub instance_seed: Option<u64>,
}

impl Default for MdpInstanceSpec {
    fn default() -> Self {
        MdpInstanceSpec {
            model: MdpModel::Random {
                n_states: 5,
                n_actions: 2,
                horizon: 5,
            },
            goal: None,
            instance_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FalsifierSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "one")]
    pub lambda: f64,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub features: Option<FeatureMode>,
}

fn default_steps() -> usize {
    500
}

fn default_trials() -> usize {
    500
}

/// One learner entry. Unset parameters take the prescribed defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    Save {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default, rename = "R")]
        big_r: Option<f64>,
    },
    Oful {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default, rename = "R")]
        big_r: Option<f64>,
        #[serde(default)]
        radius: Option<f64>,
    },
    WeightedOful {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        sigma_min: Option<f64>,
        #[serde(default)]
        radius: Option<f64>,
    },
    Oracle {
        #[serde(default)]
        name: Option<String>,
    },
    UcrlAve {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default, rename = "B")]
        big_b: Option<f64>,
        #[serde(default, alias = "mdp_varhat_leading_factor")]
        leading_factor: Option<f64>,
    },
    Optimal {
        #[serde(default)]
        name: Option<String>,
    },
}

impl LearnerSpec {
    fn type_name(&self) -> &'static str {
        match self {
            LearnerSpec::Save { .. } => "save",
            LearnerSpec::Oful { .. } => "oful",
            LearnerSpec::WeightedOful { .. } => "weighted_oful",
            LearnerSpec::Oracle { .. } => "oracle",
            LearnerSpec::UcrlAve { .. } => "ucrl_ave",
            LearnerSpec::Optimal { .. } => "optimal",
        }
    }

    /// Label used for file names and summary rows.
    pub fn label(&self) -> String {
        let name = match self {
            LearnerSpec::Save { name, .. }
            | LearnerSpec::Oful { name, .. }
            | LearnerSpec::WeightedOful { name, .. }
            | LearnerSpec::Oracle { name }
            | LearnerSpec::UcrlAve { name, .. }
            | LearnerSpec::Optimal { name } => name,
        };
        name.clone().unwrap_or_else(|| self.type_name().to_string())
    }

    fn for_kind(&self) -> Kind {
        match self {
            LearnerSpec::UcrlAve { .. } | LearnerSpec::Optimal { .. } => Kind::Mdp,
            _ => Kind::Bandit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub d: usize,
    #[serde(rename = "K", default)]
    pub big_k: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(rename = "R", default = "default_r")]
    pub big_r: f64,
    #[serde(default)]
    pub bandit: Option<BanditInstanceSpec>,
    #[serde(default)]
    pub mdp: Option<MdpInstanceSpec>,
    #[serde(default)]
    pub falsifier: Option<FalsifierSpec>,
    #[serde(default)]
    pub learners: Vec<LearnerSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_r() -> f64 {
    DEFAULT_R
}

fn invalid(path: &Path, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            invalid(
                origin,
                format!("line {}, column {}: {e}", e.line(), e.column()),
            )
        })?;
        cfg.fill_defaults();
        cfg.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                invalid(origin, format!("`{name}`: {reason}"))
            }
            other => other,
        })?;
        Ok(cfg)
    }

    /// Fills in the instance and learner defaults for the configured kind.
    pub fn fill_defaults(&mut self) {
        match self.kind {
            Kind::Bandit => {
                let spec = self.bandit.get_or_insert_with(BanditInstanceSpec::default);
                if spec.schedule.is_none() {
                    spec.schedule = Some(VarianceSchedule::Constant {
                        sigma: self.big_r / 2.0,
                    });
                }
                if self.learners.is_empty() {
                    self.learners.push(LearnerSpec::Save {
                        name: None,
                        alpha: None,
                        delta: None,
                        big_r: None,
                    });
                }
            }
            Kind::Mdp => {
                self.mdp.get_or_insert_with(MdpInstanceSpec::default);
                if self.learners.is_empty() {
                    self.learners.push(LearnerSpec::UcrlAve {
                        name: None,
                        alpha: None,
                        delta: None,
                        lambda: None,
                        big_b: None,
                        leading_factor: None,
                    });
                }
            }
            Kind::Falsifier => {}
        }
        let (k, r, d) = (self.big_k, self.big_r, self.d);
        let horizon = self.horizon();
        for l in &mut self.learners {
            match l {
                LearnerSpec::Save {
                    alpha,
                    delta,
                    big_r,
                    ..
                } => {
                    let r = *big_r.get_or_insert(r);
                    alpha.get_or_insert(1.0 / (r * (k as f64).powf(1.5)));
                    delta.get_or_insert(self.delta);
                }
                LearnerSpec::Oful {
                    lambda,
                    delta,
                    big_r,
                    ..
                } => {
                    lambda.get_or_insert(1.0);
                    delta.get_or_insert(self.delta);
                    big_r.get_or_insert(r);
                }
                LearnerSpec::WeightedOful {
                    lambda,
                    delta,
                    sigma_min,
                    ..
                } => {
                    lambda.get_or_insert(1.0);
                    delta.get_or_insert(self.delta);
                    sigma_min.get_or_insert(0.01);
                }
                LearnerSpec::UcrlAve {
                    alpha,
                    delta,
                    lambda,
                    big_b,
                    leading_factor,
                    ..
                } => {
                    let h = horizon.unwrap_or(1);
                    let b = *big_b.get_or_insert((d as f64).sqrt());
                    alpha.get_or_insert(1.0 / (k as f64 * h as f64).powf(1.5));
                    lambda.get_or_insert(1.0 / (b * b));
                    delta.get_or_insert(self.delta);
                    leading_factor.get_or_insert(8.0);
                }
                LearnerSpec::Oracle { .. } | LearnerSpec::Optimal { .. } => {}
            }
        }
    }

    fn horizon(&self) -> Option<usize> {
        self.mdp.as_ref().map(|m| match &m.model {
            MdpModel::Random { horizon, .. }
            | MdpModel::RiverSwim { horizon, .. }
            | MdpModel::Deterministic { horizon, .. } => *horizon,
            MdpModel::Explicit { spec } => spec.horizon,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if self.d == 0 {
            return Err(Error::param("d", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "at least one seed required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("seeds", "seeds must be distinct"));
        }
        if !(self.big_r > 0.0 && self.big_r.is_finite()) {
            return Err(Error::param("R", "must be finite and > 0"));
        }
        if self.jobs == Some(0) {
            return Err(Error::param("jobs", "must be >= 1"));
        }
        match self.kind {
            Kind::Falsifier => {
                let f = self
                    .falsifier
                    .as_ref()
                    .ok_or_else(|| Error::param("falsifier", "falsifier settings required"))?;
                NoiseSpec {
                    sigmas: f.sigmas.clone(),
                    big_r: self.big_r,
                }
                .validate()?;
                if f.steps == 0 || f.trials == 0 {
                    return Err(Error::param("falsifier", "steps and trials must be >= 1"));
                }
                return Ok(());
            }
            Kind::Bandit | Kind::Mdp => {
                if self.big_k == 0 {
                    return Err(Error::param("K", "must be >= 1"));
                }
            }
        }
        let mut labels: Vec<String> = Vec::new();
        for l in &self.learners {
            if l.for_kind() != self.kind {
                return Err(Error::param(
                    "learners",
                    format!("learner `{}` does not apply to this kind", l.type_name()),
                ));
            }
            let label = l.label();
            if label.is_empty() || label.contains(['/', '\\', ',']) {
                return Err(Error::param(
                    "learners",
                    format!("bad learner name `{label}`"),
                ));
            }
            if labels.contains(&label) {
                return Err(Error::param(
                    "learners",
                    format!("duplicate learner name `{label}`; set `name`"),
                ));
            }
            labels.push(label);
            match l {
                LearnerSpec::Save { delta, .. }
                | LearnerSpec::Oful { delta, .. }
                | LearnerSpec::WeightedOful { delta, .. }
                | LearnerSpec::UcrlAve { delta, .. } => {
                    if let Some(d) = delta {
                        check_delta(*d)?;
                    }
                }
                _ => {}
            }
        }
        // building one instance surfaces instance errors before any run starts
        let seed = self.seeds[0];
        match self.kind {
            Kind::Bandit => {
                self.build_bandit(seed)?;
            }
            Kind::Mdp => {
                let m = self.build_mdp(seed)?;
                if m.dim() != self.d {
                    return Err(Error::param(
                        "d",
                        format!(
                            "instance has {} basis kernels, config says {}",
                            m.dim(),
                            self.d
                        ),
                    ));
                }
            }
            Kind::Falsifier => {}
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Shifts the run seeds; a pinned `instance_seed` stays put.
    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }

    pub fn build_bandit(&self, seed: u64) -> Result<BanditInstance> {
        let spec = self
            .bandit
            .as_ref()
            .ok_or_else(|| Error::param("bandit", "bandit instance settings missing"))?;
        let mut rng = instance_rng(spec.instance_seed.unwrap_or(seed));
        let schedule = spec.schedule.clone().unwrap_or(VarianceSchedule::Constant {
            sigma: self.big_r / 2.0,
        });
        let mut inst = match spec.arms {
            ArmSpec::FixedSphere { n } => BanditInstance::fixed_sphere(
                self.d,
                n,
                spec.theta_norm,
                schedule,
                self.big_r,
                self.big_k,
                &mut rng,
            )?,
            ArmSpec::FreshSphere { n } => BanditInstance::fresh_sphere(
                self.d,
                n,
                spec.theta_norm,
                schedule,
                self.big_r,
                self.big_k,
                &mut rng,
            )?,
            ArmSpec::TwoArm { gap } => {
                BanditInstance::two_arm(self.d, gap, schedule, self.big_r, self.big_k)?
            }
        };
        inst.noise = spec.noise;
        Ok(inst)
    }

    pub fn build_mdp(&self, seed: u64) -> Result<MixtureMdp> {
        let spec = self
            .mdp
            .as_ref()
            .ok_or_else(|| Error::param("mdp", "mdp instance settings missing"))?;
        let mut rng = instance_rng(spec.instance_seed.unwrap_or(seed));
        let m = match &spec.model {
            MdpModel::Random {
                n_states,
                n_actions,
                horizon,
            } => MixtureMdp::random(*n_states, *n_actions, *horizon, self.d, &mut rng)?,
            MdpModel::RiverSwim {
                n_states,
                horizon,
                theta_star,
            } => {
                let theta = theta_star
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / self.d as f64; self.d]);
                MixtureMdp::river_swim(*n_states, *horizon, theta)?
            }
            MdpModel::Deterministic {
                n_states,
                n_actions,
                horizon,
            } => MixtureMdp::deterministic(*n_states, *n_actions, *horizon, self.d, &mut rng)?,
            MdpModel::Explicit { spec } => MixtureMdp::new(spec.clone())?,
        };
        match spec.goal {
            Some(g) => m.with_goal_reward(g.state, g.value),
            None => Ok(m),
        }
    }

    pub fn falsifier_config(&self, seed: u64) -> Result<FalsifierConfig> {
        let f = self
            .falsifier
            .as_ref()
            .ok_or_else(|| Error::param("falsifier", "falsifier settings required"))?;
        Ok(FalsifierConfig {
            dim: self.d,
            steps: f.steps,
            trials: f.trials,
            delta: self.delta,
            lambda: f.lambda,
            noise: NoiseSpec {
                sigmas: f.sigmas.clone(),
                big_r: self.big_r,
            },
            features: f.features.unwrap_or(FeatureMode::Sphere),
            seed,
        })
    }
}

/// Reads and validates a JSON config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text, path)
}

/// Instances draw from their own stream so that they never share randomness
/// with the run that uses them.
pub fn instance_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn bandit_learner(spec: &LearnerSpec, inst: &BanditInstance) -> Result<Box<dyn BanditLearner>> {
    let d = inst.dim();
    let missing = || Error::Internal("learner defaults were not filled".into());
    Ok(match spec {
        LearnerSpec::Save {
            alpha,
            delta,
            big_r,
            ..
        } => Box::new(SaveLearner::new(
            d,
            SaveConfig {
                alpha: alpha.ok_or_else(missing)?,
                delta: delta.ok_or_else(missing)?,
                big_r: big_r.ok_or_else(missing)?,
            },
        )?),
        LearnerSpec::Oful {
            lambda,
            delta,
            big_r,
            radius,
            ..
        } => Box::new(OfulLearner::new(
            d,
            OfulConfig {
                lambda: lambda.ok_or_else(missing)?,
                delta: delta.ok_or_else(missing)?,
                big_r: big_r.ok_or_else(missing)?,
                arm_bound: inst.arm_bound,
                radius_override: *radius,
            },
        )?),
        LearnerSpec::WeightedOful {
            lambda,
            delta,
            sigma_min,
            radius,
            ..
        } => Box::new(WeightedOfulLearner::new(
            d,
            WeightedOfulConfig {
                lambda: lambda.ok_or_else(missing)?,
                delta: delta.ok_or_else(missing)?,
                arm_bound: inst.arm_bound,
                sigma_min: sigma_min.ok_or_else(missing)?,
                radius_override: *radius,
            },
        )?),
        LearnerSpec::Oracle { .. } => Box::new(OracleLearner {
            theta_star: inst.theta_star.clone(),
        }),
        _ => return Err(Error::param("learners", "not a bandit learner")),
    })
}

fn mdp_learner(spec: &LearnerSpec, m: &MixtureMdp) -> Result<Box<dyn MdpLearner>> {
    let missing = || Error::Internal("learner defaults were not filled".into());
    Ok(match spec {
        LearnerSpec::UcrlAve {
            alpha,
            delta,
            lambda,
            big_b,
            leading_factor,
            ..
        } => Box::new(UcrlAve::new(
            m.dim(),
            m.horizon(),
            UcrlAveConfig {
                alpha: alpha.ok_or_else(missing)?,
                delta: delta.ok_or_else(missing)?,
                lambda: lambda.ok_or_else(missing)?,
                big_b: big_b.ok_or_else(missing)?,
                leading_factor: leading_factor.ok_or_else(missing)?,
            },
        )?),
        LearnerSpec::Optimal { .. } => Box::new(OptimalPolicy::new(m)),
        _ => return Err(Error::param("learners", "not an MDP learner")),
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// In-memory record of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub learner: String,
    pub seed: u64,
    /// File name relative to the sweep directory.
    pub file: String,
    /// Cumulative regret after each round or episode.
    #[serde(skip)]
    pub cum_regret: Vec<f64>,
    /// Bandits: 1 if any round's coverage flag failed, else 0.
    /// MDPs: fraction of episodes with a failed optimism flag.
    pub violation: f64,
    /// Sample counts per layer at the end of the run (layered learners only).
    pub psi_counts: Vec<u64>,
    /// Bandits: first `(k, layer)` where the true-variance radius failed.
    #[serde(skip)]
    pub oracle_coverage_violation: Option<(u64, usize)>,
    /// Bandits: rounds in which no optimal arm survived elimination.
    #[serde(skip)]
    pub optimal_eliminated_rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub learner: String,
    pub checkpoint_k: u64,
    pub runs: usize,
    pub mean_cum_regret: f64,
    pub median_cum_regret: f64,
    pub stderr: f64,
    pub violation_fraction: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    code_version: &'static str,
    wall_clock_secs: f64,
    runs: &'a [RunResult],
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_caps(learner: &str, counts: &[u64], cap: impl Fn(usize) -> f64) -> Result<()> {
    for (i, &c) in counts.iter().enumerate() {
        let bound = cap(i + 1);
        if c as f64 > bound {
            return Err(Error::Internal(format!(
                "{learner}: layer {} holds {c} samples, above the cap {bound:.1}",
                i + 1
            )));
        }
    }
    Ok(())
}

fn run_one(cfg: &ExperimentConfig, spec: &LearnerSpec, seed: u64, dir: &Path) -> Result<RunResult> {
    let label = spec.label();
    let file = format!("{label}_seed{seed}.csv");
    let mut buf = Vec::new();
    let result = match cfg.kind {
        Kind::Bandit => {
            let inst = cfg.build_bandit(seed)?;
            let mut learner = bandit_learner(spec, &inst)?;
            let run = run_bandit(&inst, learner.as_mut(), seed)?;
            check_caps(&label, &run.psi_counts, |ell| {
                bandit::psi_cap(inst.dim(), ell, inst.big_k, inst.arm_bound)
            })?;
            run.write_csv(&mut buf)?;
            RunResult {
                learner: label,
                seed,
                file: file.clone(),
                cum_regret: run.records.iter().map(|r| r.cum_regret).collect(),
                violation: if run.all_covered() { 0.0 } else { 1.0 },
                psi_counts: run.psi_counts.clone(),
                oracle_coverage_violation: run.oracle_coverage_violation,
                optimal_eliminated_rounds: run.optimal_eliminated_rounds,
            }
        }
        Kind::Mdp => {
            let m = cfg.build_mdp(seed)?;
            let mut learner = mdp_learner(spec, &m)?;
            let run = run_mdp(&m, learner.as_mut(), cfg.big_k, seed)?;
            let lambda = match spec {
                LearnerSpec::UcrlAve { lambda, .. } => lambda.unwrap_or(1.0),
                _ => 1.0,
            };
            check_caps(&label, &run.psi_counts(), |ell| {
                mdp::psi_cap(m.dim(), ell, cfg.big_k, m.horizon(), lambda)
            })?;
            run.write_csv(&mut buf)?;
            RunResult {
                learner: label,
                seed,
                file: file.clone(),
                cum_regret: run.records.iter().map(|r| r.cum_regret).collect(),
                violation: run.optimism_violation_fraction(),
                psi_counts: run.psi_counts(),
                oracle_coverage_violation: None,
                optimal_eliminated_rounds: 0,
            }
        }
        Kind::Falsifier => return Err(Error::param("kind", "use the falsifier entry point")),
    };
    write_atomic(&dir.join(&file), &buf)?;
    Ok(result)
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))
}

/// Runs every `(learner, seed)` pair, then writes `summary.csv` and `manifest.json`.
pub fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.kind == Kind::Falsifier {
        return run_falsifier_sweep(cfg, dir);
    }
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tasks: Vec<(&LearnerSpec, u64)> = cfg
        .learners
        .iter()
        .flat_map(|l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let pool = thread_pool(cfg.jobs)?;
    let runs: Vec<RunResult> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(spec, seed)| run_one(cfg, spec, *seed, dir))
            .collect::<Result<Vec<_>>>()
    })?;

    let labels: Vec<String> = cfg.learners.iter().map(LearnerSpec::label).collect();
    let summary = aggregate(&labels, &runs, cfg.big_k);
    let mut buf = Vec::new();
    write_summary(&summary, &mut buf)?;
    write_atomic(&dir.join("summary.csv"), &buf)?;
    write_manifest(cfg, &runs, started, dir)?;
    Ok(SweepOutcome {
        dir: dir.to_path_buf(),
        runs,
        summary,
    })
}

fn write_manifest(
    cfg: &ExperimentConfig,
    runs: &[RunResult],
    started: Instant,
    dir: &Path,
) -> Result<()> {
    let manifest = Manifest {
        config: cfg,
        code_version: env!("CARGO_PKG_VERSION"),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        runs,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

fn run_falsifier_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<SweepOutcome> {
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pool = thread_pool(cfg.jobs)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let fc = cfg.falsifier_config(seed)?;
        let report = pool.install(|| martingale_falsifier(&fc))?;
        let file = format!("falsifier_seed{seed}.csv");
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_atomic(&dir.join(&file), &buf)?;
        runs.push(RunResult {
            learner: "falsifier".into(),
            seed,
            file,
            cum_regret: Vec::new(),
            violation: report.violation_fraction,
            psi_counts: Vec::new(),
            oracle_coverage_violation: None,
            optimal_eliminated_rounds: 0,
        });
    }
    let summary: Vec<SummaryRow> = runs
        .iter()
        .map(|r| SummaryRow {
            learner: r.learner.clone(),
            checkpoint_k: cfg.falsifier.as_ref().map_or(0, |f| f.steps as u64),
            runs: 1,
            mean_cum_regret: f64::NAN,
            median_cum_regret: f64::NAN,
            stderr: f64::NAN,
            violation_fraction: r.violation,
            slope: f64::NAN,
        })
        .collect();
    let mut buf = Vec::new();
    write_summary(&summary, &mut buf)?;
    write_atomic(&dir.join("summary.csv"), &buf)?;
    write_manifest(cfg, &runs, started, dir)?;
    Ok(SweepOutcome {
        dir: dir.to_path_buf(),
        runs,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// `K/10, K/4, K/2, K`, each at least 1.
pub fn checkpoints(big_k: u64) -> [u64; 4] {
    [big_k / 10, big_k / 4, big_k / 2, big_k].map(|c| c.max(1))
}

/// `SLOPE_POINTS` log-spaced rounds in `[K/10, K]`, deduplicated after rounding.
pub fn slope_grid(big_k: u64) -> Vec<u64> {
    let lo = ((big_k as f64) / 10.0).max(1.0);
    let hi = big_k as f64;
    let mut grid: Vec<u64> = (0..SLOPE_POINTS)
        .map(|i| {
            let t = i as f64 / (SLOPE_POINTS - 1) as f64;
            (lo.ln() + t * (hi.ln() - lo.ln())).exp().round() as u64
        })
        .map(|k| k.clamp(1, big_k))
        .collect();
    grid.dedup();
    grid
}

/// Least-squares slope of `ln y` against `ln x`, skipping nonpositive `y`.
pub fn loglog_slope(xs: &[u64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&x, &y)| ((x as f64).ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard error of the mean; 0 for a single sample.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

fn at(curve: &[f64], k: u64) -> f64 {
    curve[(k as usize).min(curve.len()) - 1]
}

pub fn aggregate(labels: &[String], runs: &[RunResult], big_k: u64) -> Vec<SummaryRow> {
    let grid = slope_grid(big_k);
    let mut rows = Vec::new();
    for label in labels {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| &r.learner == label).collect();
        if mine.is_empty() {
            continue;
        }
        let violation = mean(&mine.iter().map(|r| r.violation).collect::<Vec<_>>());
        let mean_curve: Vec<f64> = grid
            .iter()
            .map(|&k| {
                mean(
                    &mine
                        .iter()
                        .map(|r| at(&r.cum_regret, k))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let slope = loglog_slope(&grid, &mean_curve);
        for c in checkpoints(big_k) {
            let vals: Vec<f64> = mine.iter().map(|r| at(&r.cum_regret, c)).collect();
            rows.push(SummaryRow {
                learner: label.clone(),
                checkpoint_k: c,
                runs: vals.len(),
                mean_cum_regret: mean(&vals),
                median_cum_regret: median(&vals),
                stderr: stderr(&vals),
                violation_fraction: violation,
                slope,
            });
        }
    }
    rows
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "learner",
    "checkpoint_k",
    "runs",
    "mean_cum_regret",
    "median_cum_regret",
    "stderr",
    "violation_fraction",
    "slope",
];

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.learner.clone(),
            r.checkpoint_k.to_string(),
            r.runs.to_string(),
            r.mean_cum_regret.to_string(),
            r.median_cum_regret.to_string(),
            r.stderr.to_string(),
            r.violation_fraction.to_string(),
            r.slope.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("summary.csv", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ManifestRuns {
    runs: Vec<ManifestRun>,
}

#[derive(Debug, Deserialize)]
struct ManifestRun {
    learner: String,
    file: String,
}

/// Prints `summary.csv` from a sweep directory as an aligned table and writes
/// `curves.csv` (`k, learner, mean_cum_regret, stderr`) next to it.
pub fn report<W: Write>(dir: &Path, mut out: W) -> Result<()> {
    let summary_path = dir.join("summary.csv");
    let mut rdr = open_csv(&summary_path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r.get(c).map_or(0, String::len))
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let io = |e| Error::io("<report output>", e);
    writeln!(out, "{}", line(&header)).map_err(io)?;
    for r in &rows {
        writeln!(out, "{}", line(r)).map_err(io)?;
    }

    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ManifestRuns = serde_json::from_str(&text)?;
    let mut learners: Vec<String> = Vec::new();
    for r in &manifest.runs {
        if !learners.contains(&r.learner) {
            learners.push(r.learner.clone());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "learner", "mean_cum_regret", "stderr"])?;
    for learner in &learners {
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for r in manifest.runs.iter().filter(|r| &r.learner == learner) {
            if let Some(c) = read_cum_regret(&dir.join(&r.file))? {
                curves.push(c);
            }
        }
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        for i in 0..len {
            let vals: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            w.write_record([
                (i + 1).to_string(),
                learner.clone(),
                mean(&vals).to_string(),
                stderr(&vals).to_string(),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Internal(format!("curves buffer: {e}")))?;
    write_atomic(&dir.join("curves.csv"), &bytes)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

/// The `cum_regret` column of a run file; `None` for files without one.
fn read_cum_regret(path: &Path) -> Result<Option<Vec<f64>>> {
    let mut rdr = open_csv(path)?;
    let Some(col) = rdr.headers()?.iter().position(|h| h == "cum_regret") else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let v: f64 = rec[col]
            .parse()
            .map_err(|e| invalid(path, format!("bad cum_regret value: {e}")))?;
        out.push(v);
    }
    Ok(Some(out))
}
