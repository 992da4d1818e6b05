//! Seeded trial farm with confidence-interval stopping and CSV reports.
//!
//! Config files are TOML:
//!
//! ```toml
//! kind = "convergence"      # convergence | poa | balance | energy | dynamics | cost
//! master_seed = 1
//! # trials = 500            # fixed trial count, disables CI stopping
//! # oracle_budget = 10000000
//!
//! [sweep]
//! variable = "n"            # n | m | eta | edge-prob | mean-degree | a | jitter-band | cost-coeff
//! values = [8, 16, 32, 64]
//!
//! [stopping]
//! confidence = 0.95
//! rel_half_width = 0.1
//! min_trials = 10
//! max_trials = 2000
//! batch = 16
//!
//! [gen]                     # scenarios::GenParams, seed is ignored
//! m = 37
//! mean_degree = 3.5
//!
//! [protocol]                # protocol::ProtocolConfig
//! eta = 0.9
//! ```
//!
//! Each trial draws its instance and initial placement from seeds derived
//! from `master_seed`. Sweeps over protocol parameters reuse the same
//! instance seeds at every point, so points are compared on common
//! instances.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::cost::CostVariant;
use crate::model::{Instance, Outcome, Snapshot};
use crate::oracle::{self, OracleError};
use crate::protocol::{self, Jitter, ProtocolConfig, ProtocolError};
use crate::scenarios::{self, GenParams, ScenarioError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 samples for a confidence interval, got {0}")]
    InsufficientSamples(usize),
    #[error("no feasible instance after {0} draws")]
    NoFeasibleInstance(usize),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Convergence,
    Poa,
    Balance,
    Energy,
    Dynamics,
    Cost,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::Convergence,
        Self::Poa,
        Self::Balance,
        Self::Energy,
        Self::Dynamics,
        Self::Cost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::Poa => "poa",
            Self::Balance => "balance",
            Self::Energy => "energy",
            Self::Dynamics => "dynamics",
            Self::Cost => "cost",
        }
    }

    /// Metric names in output order; the first drives CI stopping.
    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            Self::Convergence => &["rounds", "migrations", "converged", "max_cost_increase"],
            Self::Poa => &["poa", "rounds", "converged", "eta_nash", "nash", "max_cost_increase", "w_min", "w_max"],
            Self::Balance => &["util_sd", "util_sd_initial", "max_ideal_gap", "rounds", "converged"],
            Self::Energy => &["idle", "idle_initial", "idle_ideal", "ideal_exact", "rounds", "converged"],
            Self::Dynamics => &["rounds", "converged", "max_increment_ratio", "migrations"],
            Self::Cost => &[
                "none_total",
                "none_first_half",
                "none_second_half",
                "penalty_total",
                "penalty_first_half",
                "penalty_second_half",
                "adaptive_total",
                "adaptive_first_half",
                "adaptive_second_half",
                "min_eta",
                "max_r",
            ],
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariable {
    N,
    M,
    Eta,
    EdgeProb,
    MeanDegree,
    A,
    JitterBand,
    CostCoeff,
}

impl SweepVariable {
    /// Whether the variable changes the generated instances.
    pub fn shapes_instance(self) -> bool {
        matches!(self, Self::N | Self::M | Self::EdgeProb | Self::MeanDegree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stopping {
    pub confidence: f64,
    /// Target CI half-width relative to the mean.
    pub rel_half_width: f64,
    pub min_trials: usize,
    pub max_trials: usize,
    /// Trials run in parallel between stopping checks.
    pub batch: usize,
}

impl Default for Stopping {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            rel_half_width: 0.1,
            min_trials: 10,
            max_trials: 2000,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub master_seed: u64,
    /// Fixed number of trials per point; disables CI stopping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub stopping: Stopping,
    #[serde(default)]
    pub gen: GenParams,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

fn default_oracle_budget() -> u128 {
    oracle::DEFAULT_BUDGET
}

impl ExperimentConfig {
    /// Desk-scale defaults reproducing each figure's regime.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut c = Self {
            kind,
            master_seed: 1,
            trials: None,
            oracle_budget: oracle::DEFAULT_BUDGET,
            sweep: None,
            stopping: Stopping::default(),
            gen: GenParams::default(),
            protocol: ProtocolConfig::default(),
        };
        let sweep = |variable, values: &[f64]| {
            Some(Sweep {
                variable,
                values: values.to_vec(),
            })
        };
        match kind {
            ExperimentKind::Convergence => {
                c.gen.m = 37;
                c.gen.mean_degree = Some(3.5);
                c.sweep = sweep(SweepVariable::N, &[8.0, 16.0, 32.0, 64.0]);
            }
            ExperimentKind::Poa => {
                c.sweep = sweep(SweepVariable::Eta, &[0.5, 0.7, 0.9, 0.99]);
            }
            ExperimentKind::Balance => {
                c.gen.m = 20;
                c.protocol.eta = 0.99;
                c.sweep = sweep(SweepVariable::N, &[20.0, 50.0, 100.0, 150.0]);
            }
            ExperimentKind::Energy => {
                c.gen.m = 20;
                c.protocol.eta = 0.99;
                c.sweep = sweep(SweepVariable::N, &[4.0, 6.0, 8.0, 10.0, 15.0, 20.0]);
            }
            ExperimentKind::Dynamics => {
                c.protocol.jitter = Some(Jitter { band: 0.1 });
                c.sweep = sweep(SweepVariable::JitterBand, &[0.0, 0.05, 0.1, 0.2]);
            }
            ExperimentKind::Cost => {
                c.protocol.eta = 1.0;
                c.sweep = sweep(SweepVariable::CostCoeff, &[0.0, 1.0, 10.0]);
            }
        }
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep values must be non-empty".into());
            }
        }
        let st = &self.stopping;
        if !(st.confidence > 0.0 && st.confidence < 1.0) {
            return bad(format!("confidence must lie in (0, 1), got {}", st.confidence));
        }
        if !(st.rel_half_width > 0.0) {
            return bad("rel_half_width must be positive".into());
        }
        if st.batch == 0 || st.max_trials == 0 || st.min_trials > st.max_trials {
            return bad("need batch > 0 and 0 < min_trials <= max_trials".into());
        }
        if self.trials == Some(0) {
            return bad("trials must be positive".into());
        }
        for (_, value) in self.points() {
            let (gen, proto) = self.at_point(value)?;
            gen.validate()?;
            proto.validate()?;
        }
        Ok(())
    }

    /// `(index, value)` of every sweep point.
    pub fn points(&self) -> Vec<(usize, f64)> {
        match &self.sweep {
            Some(s) => s.values.iter().copied().enumerate().collect(),
            None => vec![(0, self.gen.n as f64)],
        }
    }

    /// Generator and protocol parameters at one sweep value.
    pub fn at_point(&self, value: f64) -> Result<(GenParams, ProtocolConfig), ExperimentError> {
        let mut gen = self.gen.clone();
        let mut proto = self.protocol.clone();
        let Some(sweep) = &self.sweep else {
            return Ok((gen, proto));
        };
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(ExperimentError::InvalidConfig(format!("sweep value {v} must be a count")))
            }
        };
        match sweep.variable {
            SweepVariable::N => gen.n = count(value)?,
            SweepVariable::M => gen.m = count(value)?,
            SweepVariable::Eta => proto.eta = value,
            SweepVariable::EdgeProb => gen.edge_prob = value,
            SweepVariable::MeanDegree => gen.mean_degree = Some(value),
            SweepVariable::A => proto.reg.a = value,
            SweepVariable::JitterBand => {
                proto.jitter = (value > 0.0).then_some(Jitter { band: value });
            }
            SweepVariable::CostCoeff => proto.cost.coeff = value,
        }
        Ok((gen, proto))
    }

    fn instance_key(&self, point: usize) -> u64 {
        match &self.sweep {
            Some(s) if s.variable.shapes_instance() => point as u64,
            _ => 0,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derived from a master seed and a key path.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(master), |h, &k| mix(h ^ mix(k)))
}

const MAX_REDRAWS: u64 = 100;

/// A trial's instance, initial placement, and the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSetup {
    pub instance: Instance,
    pub initial: Outcome,
    pub seed: u64,
    pub protocol: ProtocolConfig,
}

/// Rebuilds the instance and placement of trial `trial` at sweep point
/// `point`. Infeasible draws are redrawn with the next derived seed.
pub fn trial_setup(config: &ExperimentConfig, point: usize, trial: usize) -> Result<TrialSetup, ExperimentError> {
    let value = config
        .points()
        .get(point)
        .map(|p| p.1)
        .ok_or_else(|| ExperimentError::InvalidConfig(format!("no sweep point {point}")))?;
    let (mut gen, protocol) = config.at_point(value)?;
    let key = config.instance_key(point);
    for attempt in 0..MAX_REDRAWS {
        let seed = derive_seed(config.master_seed, &[key, trial as u64, attempt]);
        gen.seed = seed;
        let instance = match config.kind {
            ExperimentKind::Balance => scenarios::preset_load_balancing(&gen)?,
            ExperimentKind::Energy => scenarios::preset_energy(&gen)?,
            _ => scenarios::gen_random_instance(&gen)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
        match scenarios::initial_assignment(&instance, &mut rng) {
            Ok(initial) => {
                return Ok(TrialSetup {
                    instance,
                    initial,
                    seed,
                    protocol,
                })
            }
            Err(ScenarioError::NoFeasibleAssignment) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(ExperimentError::NoFeasibleInstance(MAX_REDRAWS as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// Values aligned with [`ExperimentKind::metrics`].
    pub values: Vec<f64>,
    pub violations: Vec<String>,
}

fn utilization_sd(inst: &Instance, outcome: &Outcome) -> f64 {
    let loads = inst.loads(outcome);
    let util: Vec<f64> = loads.iter().zip(inst.gamma()).map(|(l, g)| l / g).collect();
    population_sd(&util)
}

fn population_sd(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn idle_count(inst: &Instance, outcome: &Outcome) -> usize {
    inst.loads(outcome).iter().filter(|&&l| l == 0.0).count()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Runs one trial of the configured kind.
pub fn run_trial(config: &ExperimentConfig, point: usize, trial: usize) -> Result<TrialResult, ExperimentError> {
    let setup = trial_setup(config, point, trial)?;
    let TrialSetup {
        instance: inst,
        initial,
        seed,
        protocol: proto,
    } = setup;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut violations = Vec::new();
    let values = match config.kind {
        ExperimentKind::Convergence => {
            let t = protocol::run(&inst, &initial, &proto, &mut rng)?;
            vec![
                t.num_rounds() as f64,
                t.total_migrations() as f64,
                flag(t.converged()),
                t.max_cost_increase(),
            ]
        }
        ExperimentKind::Poa => {
            let t = protocol::run(&inst, &initial, &proto, &mut rng)?;
            let opt = oracle::brute_force_optimum_with_budget(&inst, &proto.reg, config.oracle_budget)?;
            let poa = oracle::poa_against(&inst, &t.final_outcome, &proto.reg, &opt)?;
            if poa < 1.0 - 1e-9 {
                violations.push(format!("PoA {poa} below 1"));
            }
            let eta_nash = oracle::verify_eta_nash(&inst, &t.final_outcome, &proto.reg, proto.eta)?.holds;
            let nash = oracle::verify_nash(&inst, &t.final_outcome, &proto.reg)?;
            let weights = Snapshot::new(&inst, &t.final_outcome)
                .map_err(ProtocolError::from)?
                .weights()
                .to_vec();
            let positive = weights.iter().copied().filter(|&w| w > 0.0);
            let w_min = positive.clone().fold(f64::INFINITY, f64::min);
            let w_max = positive.fold(0.0, f64::max);
            vec![
                poa,
                t.num_rounds() as f64,
                flag(t.converged()),
                flag(eta_nash),
                flag(nash),
                t.max_cost_increase(),
                w_min,
                w_max,
            ]
        }
        ExperimentKind::Balance => {
            let t = protocol::run(&inst, &initial, &proto, &mut rng)?;
            let sd = utilization_sd(&inst, &t.final_outcome);
            let sd0 = utilization_sd(&inst, &initial);
            if sd > sd0 + 1e-12 {
                violations.push(format!("utilization sd rose from {sd0} to {sd}"));
            }
            let ideal = scenarios::ideal_balanced_utilization(&inst);
            let gap = inst
                .loads(&t.final_outcome)
                .iter()
                .zip(inst.gamma())
                .zip(&ideal)
                .map(|((l, g), u)| (l / g - u).abs())
                .fold(0.0, f64::max);
            vec![sd, sd0, gap, t.num_rounds() as f64, flag(t.converged())]
        }
        ExperimentKind::Energy => {
            let t = protocol::run(&inst, &initial, &proto, &mut rng)?;
            let idle = idle_count(&inst, &t.final_outcome);
            let idle0 = idle_count(&inst, &initial);
            if idle < idle0 {
                violations.push(format!("idle clouds fell from {idle0} to {idle}"));
            }
            let ideal = scenarios::ideal_idle_clouds(&inst)?;
            vec![
                idle as f64,
                idle0 as f64,
                ideal.idle as f64,
                flag(ideal.exact),
                t.num_rounds() as f64,
                flag(t.converged()),
            ]
        }
        ExperimentKind::Dynamics => {
            let ct = protocol::run_controlled(&inst, &initial, &proto, &mut rng)?;
            let ratio = ct
                .steps
                .iter()
                .map(|s| s.max_increment / s.step)
                .fold(0.0, f64::max);
            if ratio > 1.0 + 1e-12 {
                violations.push(format!("estimate increment exceeded the step by factor {ratio}"));
            }
            vec![
                ct.trace.num_rounds() as f64,
                flag(ct.trace.converged()),
                ratio,
                ct.trace.total_migrations() as f64,
            ]
        }
        ExperimentKind::Cost => {
            let mut values = Vec::with_capacity(11);
            let mut min_eta = 1.0f64;
            let mut max_r = 0.0f64;
            for variant in [CostVariant::None, CostVariant::Penalty, CostVariant::AdaptiveEta] {
                let mut cfg = proto.clone();
                cfg.cost.variant = variant;
                // every variant sees the same move proposals
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
                let t = protocol::run(&inst, &initial, &cfg, &mut rng)?;
                let (first, second) = t.migrations_by_half();
                values.extend([t.total_migrations() as f64, first as f64, second as f64]);
                for r in t.rounds.iter().filter_map(|r| r.r.as_ref()).flatten() {
                    max_r = max_r.max(*r);
                    min_eta = min_eta.min((-r).exp());
                }
            }
            if !(0.0..=1.0).contains(&max_r) || min_eta < (-1.0f64).exp() {
                violations.push(format!("R or eta out of range: max R {max_r}, min eta {min_eta}"));
            }
            values.extend([min_eta, max_r]);
            values
        }
    };
    Ok(TrialResult {
        trial,
        seed,
        values,
        violations,
    })
}

/// Sample statistics with a Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_half_width: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sample standard deviation, `t_{(1+c)/2, n-1} · sd / √n`, and
/// quartiles. Samples are sorted first so the result does not depend on
/// their order.
pub fn summarize(values: &[f64], confidence: f64) -> Result<Summary, ExperimentError> {
    let n = values.len();
    if n < 2 {
        return Err(ExperimentError::InsufficientSamples(n));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf((1.0 + confidence) / 2.0);
    Ok(Summary {
        n,
        mean,
        sd,
        ci_half_width: t * sd / (n as f64).sqrt(),
        min: s[0],
        q25: quantile(&s, 0.25),
        q50: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
        max: s[n - 1],
    })
}

/// Quartiles `(q25, q50, q75)`; defined for any non-empty sample.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some((quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointReport {
    pub index: usize,
    pub sweep_value: f64,
    pub trials: Vec<TrialResult>,
    /// One summary per metric, `None` with fewer than two trials.
    pub summaries: Vec<Option<Summary>>,
    /// The CI target was not met within the trial budget.
    pub budget_exhausted: bool,
}

impl PointReport {
    pub fn metric(&self, kind: ExperimentKind, name: &str) -> Option<Vec<f64>> {
        let k = kind.metrics().iter().position(|m| *m == name)?;
        Some(self.trials.iter().map(|t| t.values[k]).collect())
    }

    pub fn summary(&self, kind: ExperimentKind, name: &str) -> Option<Summary> {
        let k = kind.metrics().iter().position(|m| *m == name)?;
        self.summaries[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sweep_value: f64,
    pub trial: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub points: Vec<PointReport>,
}

impl ExperimentReport {
    pub fn violations(&self) -> Vec<Violation> {
        self.points
            .iter()
            .flat_map(|p| {
                p.trials.iter().flat_map(move |t| {
                    t.violations.iter().map(move |m| Violation {
                        sweep_value: p.sweep_value,
                        trial: t.trial,
                        message: m.clone(),
                    })
                })
            })
            .collect()
    }

    pub fn write_trials_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["experiment", "sweep_value", "trial", "seed", "metric", "value"])?;
        for p in &self.points {
            for t in &p.trials {
                for (name, v) in self.kind.metrics().iter().zip(&t.values) {
                    w.write_record([
                        self.kind.name().to_string(),
                        p.sweep_value.to_string(),
                        t.trial.to_string(),
                        t.seed.to_string(),
                        name.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (point, metric); `experiment` reads `<kind>:<metric>`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "experiment",
            "sweep_value",
            "n",
            "mean",
            "sd",
            "ci_half_width",
            "min",
            "q25",
            "q50",
            "q75",
            "max",
        ])?;
        for p in &self.points {
            for (name, s) in self.kind.metrics().iter().zip(&p.summaries) {
                let Some(s) = s else { continue };
                let row = [s.mean, s.sd, s.ci_half_width, s.min, s.q25, s.q50, s.q75, s.max];
                let mut rec = vec![
                    format!("{}:{name}", self.kind),
                    p.sweep_value.to_string(),
                    s.n.to_string(),
                ];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `trials.csv` and `summary.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        self.write_trials_csv(std::fs::File::create(dir.join("trials.csv"))?)?;
        self.write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?)
    }
}

fn ci_met(values: &[f64], stopping: &Stopping) -> bool {
    match summarize(values, stopping.confidence) {
        Ok(s) => s.ci_half_width <= stopping.rel_half_width * s.mean.abs(),
        Err(_) => false,
    }
}

/// Runs every sweep point until its CI target is met or the budget runs
/// out. Trials within a batch run in parallel; the stopping decision only
/// looks at completed batches, so results do not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let mut points = Vec::new();
    for (index, value) in config.points() {
        let (target, use_ci) = match config.trials {
            Some(t) => (t, false),
            None => (config.stopping.max_trials, true),
        };
        let mut trials: Vec<TrialResult> = Vec::new();
        let mut met = false;
        while trials.len() < target {
            let start = trials.len();
            let end = (start + config.stopping.batch).min(target);
            let batch = (start..end)
                .into_par_iter()
                .map(|t| run_trial(config, index, t))
                .collect::<Result<Vec<_>, _>>()?;
            trials.extend(batch);
            if use_ci && trials.len() >= config.stopping.min_trials {
                let primary: Vec<f64> = trials.iter().map(|t| t.values[0]).collect();
                if ci_met(&primary, &config.stopping) {
                    met = true;
                    break;
                }
            }
        }
        if use_ci && !met {
            log::warn!(
                "{} at {value}: CI target not met after {} trials",
                config.kind,
                trials.len()
            );
        }
        let summaries = (0..config.kind.metrics().len())
            .map(|k| {
                let v: Vec<f64> = trials.iter().map(|t| t.values[k]).collect();
                summarize(&v, config.stopping.confidence).ok()
            })
            .collect();
        points.push(PointReport {
            index,
            sweep_value: value,
            trials,
            summaries,
            budget_exhausted: use_ci && !met,
        });
    }
    Ok(ExperimentReport {
        kind: config.kind,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn summary_of_constant_sample() {
        let s = summarize(&[1.0; 4], 0.95).unwrap();
        assert_eq!((s.mean, s.sd, s.ci_half_width), (1.0, 0.0, 0.0));
    }

    #[test]
    fn summary_two_points_uses_t_table() {
        let s = summarize(&[0.0, 2.0], 0.95).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!(rel(s.sd, 2f64.sqrt()) < 1e-15);
        assert!(rel(s.ci_half_width, 12.706) < 1e-4, "{}", s.ci_half_width);
    }

    #[test]
    fn t_quantile_matches_table() {
        // two-sided 95% critical values
        for (df, t) in [(1, 12.706), (4, 2.776), (9, 2.262), (29, 2.045), (120, 1.980)] {
            let q = StudentsT::new(0.0, 1.0, df as f64).unwrap().inverse_cdf(0.975);
            assert!(rel(q, t) < 5e-4, "df {df}: {q}");
        }
    }

    #[test]
    fn quartiles_by_interpolation() {
        let s = summarize(&[5.0, 3.0, 1.0, 4.0, 2.0], 0.95).unwrap();
        assert_eq!((s.q25, s.q50, s.q75), (2.0, 3.0, 4.0));
        assert_eq!((s.min, s.max), (1.0, 5.0));
        assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0]), Some((1.75, 2.5, 3.25)));
        assert_eq!(quartiles(&[7.0]), Some((7.0, 7.0, 7.0)));
    }

    #[test]
    fn insufficient_samples() {
        assert!(matches!(summarize(&[1.0], 0.95), Err(ExperimentError::InsufficientSamples(1))));
        assert!(matches!(summarize(&[], 0.95), Err(ExperimentError::InsufficientSamples(0))));
    }

    #[test]
    fn order_independent_summary() {
        let a = [3.5, 1.25, 9.0, 2.0, 7.75, 0.5];
        let mut b = a;
        b.reverse();
        assert_eq!(summarize(&a, 0.9).unwrap(), summarize(&b, 0.9).unwrap());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = derive_seed(1, &[0, 0, 0]);
        assert_eq!(s, derive_seed(1, &[0, 0, 0]));
        let mut all: Vec<u64> = (0..1000).map(|t| derive_seed(1, &[0, t, 0])).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1000);
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let c = ExperimentConfig::preset(kind);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn documented_config_parses() {
        let doc = include_str!("experiments.rs");
        let start = doc.find("//! ```toml").unwrap();
        let end = start + doc[start..].find("//! ```\n").unwrap();
        let body: String = doc[start..end]
            .lines()
            .skip(1)
            .map(|l| l.trim_start_matches("//!").trim_start_matches(' '))
            .collect::<Vec<_>>()
            .join("\n");
        let c = ExperimentConfig::from_toml_str(&body).unwrap();
        assert_eq!(c.kind, ExperimentKind::Convergence);
        assert_eq!(c.gen.mean_degree, Some(3.5));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = ExperimentConfig::preset(ExperimentKind::Poa);
        c.sweep = Some(Sweep {
            variable: SweepVariable::Eta,
            values: vec![],
        });
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(ExperimentKind::Poa);
        c.stopping.confidence = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(ExperimentKind::Convergence);
        c.sweep = Some(Sweep {
            variable: SweepVariable::N,
            values: vec![2.5],
        });
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("kind = \"poa\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn protocol_sweeps_share_instances() {
        let c = ExperimentConfig::preset(ExperimentKind::Poa);
        let a = trial_setup(&c, 0, 3).unwrap();
        let b = trial_setup(&c, 2, 3).unwrap();
        assert_eq!(a.instance, b.instance);
        assert_eq!(a.initial, b.initial);
        assert_ne!(a.protocol.eta, b.protocol.eta);
        let c = ExperimentConfig::preset(ExperimentKind::Convergence);
        assert_ne!(trial_setup(&c, 0, 3).unwrap().seed, trial_setup(&c, 1, 3).unwrap().seed);
    }

    #[test]
    fn balance_on_single_cloud_matches_ideal() {
        let mut c = ExperimentConfig::preset(ExperimentKind::Balance);
        c.gen.m = 1;
        c.gen.gamma_range = (100.0, 100.0);
        c.sweep = Some(Sweep {
            variable: SweepVariable::N,
            values: vec![3.0],
        });
        c.trials = Some(4);
        let r = run_experiment(&c).unwrap();
        let p = &r.points[0];
        assert!(p.metric(ExperimentKind::Balance, "max_ideal_gap").unwrap().iter().all(|&g| g == 0.0));
        assert!(p.metric(ExperimentKind::Balance, "util_sd").unwrap().iter().all(|&g| g == 0.0));
    }

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(kind);
        c.gen.m = 3;
        c.gen.n = 5;
        c.sweep = None;
        c.trials = Some(6);
        c
    }

    #[test]
    fn every_kind_runs_and_is_reproducible() {
        for kind in ExperimentKind::ALL {
            let c = small(kind);
            let a = run_experiment(&c).unwrap();
            let b = run_experiment(&c).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(a.points[0].trials.len(), 6);
            assert!(a.violations().is_empty(), "{kind}: {:?}", a.violations());
            let mut ta = Vec::new();
            let mut sa = Vec::new();
            a.write_trials_csv(&mut ta).unwrap();
            a.write_summary_csv(&mut sa).unwrap();
            let mut tb = Vec::new();
            b.write_trials_csv(&mut tb).unwrap();
            assert_eq!(ta, tb);
            let trials = String::from_utf8(ta).unwrap();
            assert!(trials.starts_with("experiment,sweep_value,trial,seed,metric,value\n"));
            assert_eq!(trials.lines().count(), 1 + 6 * kind.metrics().len());
            let summary = String::from_utf8(sa).unwrap();
            assert_eq!(summary.lines().count(), 1 + kind.metrics().len());
        }
    }

    #[test]
    fn ci_stopping_respects_bounds() {
        let mut c = small(ExperimentKind::Convergence);
        c.trials = None;
        c.stopping = Stopping {
            min_trials: 10,
            max_trials: 40,
            batch: 8,
            ..Stopping::default()
        };
        let r = run_experiment(&c).unwrap();
        let n = r.points[0].trials.len();
        assert!((10..=40).contains(&n));
        if !r.points[0].budget_exhausted {
            let s = r.points[0].summaries[0].unwrap();
            assert!(s.ci_half_width <= 0.1 * s.mean);
        }
    }

    #[test]
    fn summary_half_width_consistent() {
        let mut c = small(ExperimentKind::Poa);
        c.trials = Some(12);
        let r = run_experiment(&c).unwrap();
        let v = r.points[0].metric(ExperimentKind::Poa, "poa").unwrap();
        let s = r.points[0].summary(ExperimentKind::Poa, "poa").unwrap();
        let t = StudentsT::new(0.0, 1.0, 11.0).unwrap().inverse_cdf(0.975);
        assert!((s.ci_half_width - t * s.sd / 12f64.sqrt()).abs() < 1e-12);
        assert!(v.iter().all(|&p| p >= 1.0 - 1e-9));
    }
}
