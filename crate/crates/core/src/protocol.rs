//! The round engine: greedy migration with threshold `η`, equilibrium
//! detection, and the controlled variant with per-VM utility estimates.
//!
//! VM `i` on cloud `x` moves to a candidate `y` when
//!
//! `u_i(y) f(w_y + u_i(y)) <= η u_i(x) f(w_x - u_i(x))`
//!
//! where `u_i(y)` is evaluated on the outcome in which `i` already sits on
//! `y`, and `u_i(x)`, `w_x`, `w_y` are current values. Moves that would
//! overload `y` are never accepted.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{penalized_utility, CostConfig, CostState, CostVariant};
use crate::model::{CloudId, Instance, ModelError, Outcome, Snapshot, VmId};
use crate::regularize::{RegFn, Regularizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid move of VM {vm} to cloud {to}: {reason}")]
    InvalidMove { vm: VmId, to: CloudId, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step sizes `b_k` for the controlled variant (`k >= 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `scale / k`
    Harmonic { scale: f64 },
    /// `scale / k^exponent`, exponent in (1/2, 1]
    Power { scale: f64, exponent: f64 },
    /// `value` (weak convergence only)
    Constant { value: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self::Harmonic { scale: 1.0 }
    }
}

impl StepSchedule {
    pub fn step(&self, k: usize) -> f64 {
        let k = k.max(1) as f64;
        match *self {
            Self::Harmonic { scale } => scale / k,
            Self::Power { scale, exponent } => scale / k.powf(exponent),
            Self::Constant { value } => value,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Self::Harmonic { scale } => scale > 0.0,
            Self::Power { scale, exponent } => scale > 0.0 && exponent > 0.5 && exponent <= 1.0,
            Self::Constant { value } => value > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("step schedule {self:?} must be positive and non-increasing"))
        }
    }
}

/// Per-round multiplicative noise on latencies: each `τ(x, y)` is scaled by
/// an independent `1 + U(-band, band)`, symmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub band: f64,
}

impl Jitter {
    pub fn apply<R: Rng + ?Sized>(&self, base: &Instance, rng: &mut R) -> Instance {
        let m = base.num_clouds();
        let mut tau = base.tau_matrix().to_vec();
        for x in 0..m {
            for y in 0..x {
                let scale = 1.0 + rng.random_range(-self.band..=self.band);
                let t = (base.tau(x, y) * scale).max(0.0);
                tau[x * m + y] = t;
                tau[y * m + x] = t;
            }
        }
        base.with_tau(tau).expect("jittered latencies stay valid")
    }
}

/// Estimate update of the controlled variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateUpdate {
    /// `u_{i,k+1} = u_{i,k} + b_k f(w_x)`
    #[default]
    Literal,
    /// `u_{i,k+1} = u_{i,k} + b_k (û_i - u_{i,k})` with `û_i` the measured
    /// utility. Not part of the original protocol.
    Innovation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub eta: f64,
    pub reg: RegFn,
    /// Defaults to `10 · n · m`.
    pub max_rounds: Option<usize>,
    pub step_schedule: StepSchedule,
    pub jitter: Option<Jitter>,
    pub estimate_update: EstimateUpdate,
    pub cost: CostConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            eta: 0.9,
            reg: RegFn::default(),
            max_rounds: None,
            step_schedule: StepSchedule::default(),
            jitter: None,
            estimate_update: EstimateUpdate::Literal,
            cost: CostConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if let Err(e) = RegFn::new(self.reg.a) {
            return bad(e.to_string());
        }
        if self.max_rounds == Some(0) {
            return bad("max_rounds must be positive".into());
        }
        self.step_schedule.validate().or_else(bad)?;
        if let Some(j) = self.jitter {
            if !(0.0..1.0).contains(&j.band) {
                return bad(format!("jitter band must lie in [0, 1), got {}", j.band));
            }
        }
        self.cost.validate().or_else(bad)
    }

    pub fn round_cap(&self, instance: &Instance) -> usize {
        self.max_rounds
            .unwrap_or_else(|| (10 * instance.num_vms() * instance.num_clouds()).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    /// The target would be overloaded.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MigrationTest {
    pub decision: Decision,
    /// `u_i(y) f(w_y + u_i(y))`; infinite when infeasible.
    pub target_side: f64,
    /// `η u_i(x) f(w_x - u_i(x))`.
    pub current_side: f64,
}

impl MigrationTest {
    pub fn accepted(&self) -> bool {
        self.decision == Decision::Accept
    }
}

/// Everything beyond the snapshot that shapes one migration test.
#[derive(Clone, Copy)]
struct TestContext<'c> {
    reg: &'c RegFn,
    eta: f64,
    cost: Option<(&'c CostState, CostVariant)>,
    estimates: Option<&'c [f64]>,
}

impl TestContext<'_> {
    fn eta_for(&self, i: VmId) -> f64 {
        match self.cost {
            Some((state, CostVariant::AdaptiveEta)) => state.adaptive_eta(i),
            _ => self.eta,
        }
    }

    fn test(&self, snap: &Snapshot<'_>, i: VmId, y: CloudId) -> MigrationTest {
        let x = snap.assignment()[i];
        let u_x = match self.estimates {
            Some(est) => est[i],
            None => snap.utility(i),
        };
        let eta = self.eta_for(i);
        let stay = u_x * self.reg.value((snap.weight(x) - u_x).max(0.0));
        let current_side = eta * stay;
        let u_y = match self.cost {
            Some((state, CostVariant::Penalty)) => penalized_utility(snap, state, i, y),
            _ => snap.anticipated_utility(i, y),
        };
        match u_y {
            Err(_) => MigrationTest {
                decision: Decision::Infeasible,
                target_side: f64::INFINITY,
                current_side,
            },
            Ok(u_y) => {
                let target_side = u_y * self.reg.value(snap.weight(y) + u_y);
                // below η = 1 a tie of the undiscounted sides (e.g. 0 vs 0) is no improvement
                let decision = if target_side <= current_side && (eta >= 1.0 || target_side < stay) {
                    Decision::Accept
                } else {
                    Decision::Reject
                };
                MigrationTest {
                    decision,
                    target_side,
                    current_side,
                }
            }
        }
    }

    /// First `(i, y)` whose test accepts, scanning VMs and then targets in
    /// index order.
    fn scan(&self, snap: &Snapshot<'_>) -> Option<(VmId, CloudId)> {
        let inst = snap.instance();
        (0..inst.num_vms()).find_map(|i| {
            let x = snap.assignment()[i];
            inst.strategy_set(i)
                .iter()
                .copied()
                .filter(|&y| y != x)
                .find(|&y| self.test(snap, i, y).accepted())
                .map(|y| (i, y))
        })
    }
}

fn check_move(instance: &Instance, outcome: &Outcome, i: VmId, y: CloudId) -> Result<(), ProtocolError> {
    let invalid = |reason: &str| {
        Err(ProtocolError::InvalidMove {
            vm: i,
            to: y,
            reason: reason.into(),
        })
    };
    if i >= instance.num_vms() {
        return invalid("unknown VM");
    }
    if instance.strategy_set(i).binary_search(&y).is_err() {
        return invalid("target outside the strategy set");
    }
    if outcome.assignment[i] == y {
        return invalid("target is the current cloud");
    }
    Ok(())
}

/// Plain migration test for VM `i` toward `y`.
pub fn migration_test(
    instance: &Instance,
    outcome: &Outcome,
    config: &ProtocolConfig,
    i: VmId,
    y: CloudId,
) -> Result<MigrationTest, ProtocolError> {
    config.validate()?;
    let snap = Snapshot::new(instance, outcome)?;
    check_move(instance, outcome, i, y)?;
    let ctx = TestContext {
        reg: &config.reg,
        eta: config.eta,
        cost: None,
        estimates: None,
    };
    Ok(ctx.test(&snap, i, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashScan {
    pub is_equilibrium: bool,
    /// First accepted deviation, if any.
    pub witness: Option<(VmId, CloudId)>,
}

/// True iff the migration test rejects every alternative of every VM.
pub fn is_eta_nash(
    instance: &Instance,
    outcome: &Outcome,
    config: &ProtocolConfig,
) -> Result<NashScan, ProtocolError> {
    config.validate()?;
    let snap = Snapshot::new(instance, outcome)?;
    let ctx = TestContext {
        reg: &config.reg,
        eta: config.eta,
        cost: None,
        estimates: None,
    };
    let witness = ctx.scan(&snap);
    Ok(NashScan {
        is_equilibrium: witness.is_none(),
        witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub vm: VmId,
    pub from: CloudId,
    pub to: CloudId,
    pub cost_before: f64,
    pub cost_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub migrations: Vec<Migration>,
    pub social_cost: f64,
    pub weights: Vec<f64>,
    pub assignment: Vec<CloudId>,
    /// Forgetting averages after the round, when a cost variant is active.
    pub r: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Equilibrium,
    RoundCap,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Equilibrium => "equilibrium",
            Self::RoundCap => "round_cap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub initial: Outcome,
    pub initial_cost: f64,
    pub rounds: Vec<RoundRecord>,
    pub final_outcome: Outcome,
    pub final_cost: f64,
    pub termination: Termination,
    /// Full deviation scans performed.
    pub scans: usize,
    /// Peer migration-cost lookups made by the penalty variant.
    pub cost_exchanges: u64,
}

impl Trace {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Equilibrium
    }

    pub fn migrations(&self) -> impl Iterator<Item = (usize, &Migration)> {
        self.rounds
            .iter()
            .flat_map(|r| r.migrations.iter().map(move |m| (r.round, m)))
    }

    pub fn total_migrations(&self) -> usize {
        self.rounds.iter().map(|r| r.migrations.len()).sum()
    }

    /// Largest single-migration increase of the social cost; 0 when no
    /// migration raised it.
    pub fn max_cost_increase(&self) -> f64 {
        self.migrations()
            .map(|(_, m)| m.cost_after - m.cost_before)
            .fold(0.0, f64::max)
    }

    /// Migrations in the first and second half of the rounds.
    pub fn migrations_by_half(&self) -> (usize, usize) {
        let half = self.rounds.len() / 2;
        let first = self.rounds[..half].iter().map(|r| r.migrations.len()).sum();
        let second = self.rounds[half..].iter().map(|r| r.migrations.len()).sum();
        (first, second)
    }

    /// CSV with header `round,vm,from_cloud,to_cloud,social_cost` (plus `r`
    /// when `with_r`): one row per accepted migration, then one summary row
    /// whose `vm` field holds the termination status.
    pub fn write_csv<W: std::io::Write>(&self, out: W, with_r: bool) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round", "vm", "from_cloud", "to_cloud", "social_cost"];
        if with_r {
            header.push("r");
        }
        w.write_record(&header)?;
        for rec in &self.rounds {
            for m in &rec.migrations {
                let mut row = vec![
                    rec.round.to_string(),
                    m.vm.to_string(),
                    m.from.to_string(),
                    m.to.to_string(),
                    m.cost_after.to_string(),
                ];
                if with_r {
                    row.push(rec.r.as_ref().map(|r| r[m.vm].to_string()).unwrap_or_default());
                }
                w.write_record(&row)?;
            }
        }
        let mut last = vec![
            self.num_rounds().to_string(),
            self.termination.to_string(),
            String::new(),
            String::new(),
            self.final_cost.to_string(),
        ];
        if with_r {
            last.push(String::new());
        }
        w.write_record(&last)?;
        w.flush()?;
        Ok(())
    }
}

/// Uniform draw from `set \ {current}`; `None` when there is no alternative.
fn draw_target<R: Rng + ?Sized>(set: &[CloudId], current: CloudId, rng: &mut R) -> Option<CloudId> {
    let pos = set.binary_search(&current).ok()?;
    if set.len() < 2 {
        return None;
    }
    let k = rng.random_range(0..set.len() - 1);
    Some(set[if k >= pos { k + 1 } else { k }])
}

struct RoundOutput {
    migrations: Vec<Migration>,
    moved: Vec<bool>,
}

/// One pass over all VMs in random order, each testing one random target
/// against the outcome as mutated so far.
fn play_round<R: Rng + ?Sized>(
    snap: &mut Snapshot<'_>,
    ctx: &TestContext<'_>,
    exchanges: &mut u64,
    rng: &mut R,
) -> RoundOutput {
    let inst = snap.instance();
    let n = inst.num_vms();
    let mut order: Vec<VmId> = (0..n).collect();
    order.shuffle(rng);
    let mut migrations = Vec::new();
    let mut moved = vec![false; n];
    for i in order {
        let x = snap.assignment()[i];
        let Some(y) = draw_target(inst.strategy_set(i), x, rng) else {
            continue;
        };
        if matches!(ctx.cost, Some((_, CostVariant::Penalty))) {
            *exchanges += inst.peers(i).len() as u64;
        }
        if ctx.test(snap, i, y).accepted() {
            let cost_before = snap.social_cost(ctx.reg);
            snap.relocate(i, y).expect("accepted moves are feasible");
            migrations.push(Migration {
                vm: i,
                from: x,
                to: y,
                cost_before,
                cost_after: snap.social_cost(ctx.reg),
            });
            moved[i] = true;
        }
    }
    RoundOutput { migrations, moved }
}

/// A single plain round. Returns the new outcome and the accepted moves.
pub fn round<R: Rng + ?Sized>(
    instance: &Instance,
    outcome: &Outcome,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<(Outcome, Vec<Migration>), ProtocolError> {
    config.validate()?;
    let mut snap = Snapshot::new(instance, outcome)?;
    let ctx = TestContext {
        reg: &config.reg,
        eta: config.eta,
        cost: None,
        estimates: None,
    };
    let out = play_round(&mut snap, &ctx, &mut 0, rng);
    Ok((snap.outcome(), out.migrations))
}

/// Runs rounds until a zero-migration round is confirmed by a full scan, or
/// the round cap is hit. Honors `config.cost`; jitter and the step schedule
/// only apply to [`run_controlled`].
pub fn run<R: Rng + ?Sized>(
    instance: &Instance,
    initial: &Outcome,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<Trace, ProtocolError> {
    config.validate()?;
    let mut snap = Snapshot::new(instance, initial)?;
    let mut cost_state = match config.cost.variant {
        CostVariant::None => None,
        _ => Some(config.cost.state(instance.num_vms())),
    };
    let initial_cost = snap.social_cost(&config.reg);
    let cap = config.round_cap(instance);
    let mut rounds = Vec::new();
    let mut scans = 0;
    let mut exchanges = 0;
    let mut termination = Termination::RoundCap;

    for k in 1..=cap {
        let ctx = TestContext {
            reg: &config.reg,
            eta: config.eta,
            cost: cost_state.as_ref().map(|s| (s, config.cost.variant)),
            estimates: None,
        };
        let out = play_round(&mut snap, &ctx, &mut exchanges, rng);
        let quiet = out.migrations.is_empty();
        if let Some(state) = cost_state.as_mut() {
            state.update_r(&out.moved);
        }
        rounds.push(RoundRecord {
            round: k,
            migrations: out.migrations,
            social_cost: snap.social_cost(&config.reg),
            weights: snap.weights().to_vec(),
            assignment: snap.assignment().to_vec(),
            r: cost_state.as_ref().map(|s| s.r().to_vec()),
        });
        if quiet {
            scans += 1;
            let ctx = TestContext {
                reg: &config.reg,
                eta: config.eta,
                cost: cost_state.as_ref().map(|s| (s, config.cost.variant)),
                estimates: None,
            };
            if ctx.scan(&snap).is_none() {
                termination = Termination::Equilibrium;
                break;
            }
        }
    }

    Ok(Trace {
        initial: initial.clone(),
        initial_cost,
        final_outcome: snap.outcome(),
        final_cost: snap.social_cost(&config.reg),
        rounds,
        termination,
        scans,
        cost_exchanges: exchanges,
    })
}

/// Per-VM utility estimates of the controlled variant.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityState {
    pub estimates: Vec<f64>,
    /// Index of the next round (starts at 1).
    pub k: usize,
}

impl UtilityState {
    /// Estimates initialized to the measured utilities of `outcome`.
    pub fn measured(instance: &Instance, outcome: &Outcome) -> Result<Self, ModelError> {
        let snap = Snapshot::new(instance, outcome)?;
        Ok(Self {
            estimates: snap.utilities().to_vec(),
            k: 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlledRound {
    pub outcome: Outcome,
    pub migrations: Vec<Migration>,
    pub step: f64,
    /// Largest `|u_{i,k+1} - u_{i,k}|` over VMs in this round.
    pub max_increment: f64,
    /// Instance the round was evaluated on (jittered when configured).
    pub instance: Instance,
}

fn controlled_step<R: Rng + ?Sized>(
    base: &Instance,
    outcome: &Outcome,
    config: &ProtocolConfig,
    state: &mut UtilityState,
    rng: &mut R,
) -> Result<ControlledRound, ProtocolError> {
    let inst = match config.jitter {
        Some(j) => j.apply(base, rng),
        None => base.clone(),
    };
    let mut snap = Snapshot::new(&inst, outcome)?;
    let step = config.step_schedule.step(state.k);
    let n = inst.num_vms();
    let mut order: Vec<VmId> = (0..n).collect();
    order.shuffle(rng);
    let mut migrations = Vec::new();
    let mut max_increment: f64 = 0.0;
    for i in order {
        let x = snap.assignment()[i];
        if let Some(y) = draw_target(inst.strategy_set(i), x, rng) {
            let ctx = TestContext {
                reg: &config.reg,
                eta: config.eta,
                cost: None,
                estimates: Some(&state.estimates),
            };
            if ctx.test(&snap, i, y).accepted() {
                let cost_before = snap.social_cost(&config.reg);
                snap.relocate(i, y)?;
                migrations.push(Migration {
                    vm: i,
                    from: x,
                    to: y,
                    cost_before,
                    cost_after: snap.social_cost(&config.reg),
                });
            }
        }
        let here = snap.assignment()[i];
        let old = state.estimates[i];
        let new = match config.estimate_update {
            EstimateUpdate::Literal => old + step * config.reg.value(snap.weight(here)),
            EstimateUpdate::Innovation => old + step * (snap.utility(i) - old),
        };
        state.estimates[i] = new;
        max_increment = max_increment.max((new - old).abs());
    }
    state.k += 1;
    Ok(ControlledRound {
        outcome: snap.outcome(),
        migrations,
        step,
        max_increment,
        instance: inst,
    })
}

/// One controlled round: the current-cloud side of the test uses the stored
/// estimates; after its turn each VM updates its estimate with `b_k`.
pub fn controlled_round<R: Rng + ?Sized>(
    instance: &Instance,
    outcome: &Outcome,
    config: &ProtocolConfig,
    state: &mut UtilityState,
    rng: &mut R,
) -> Result<ControlledRound, ProtocolError> {
    config.validate()?;
    if state.k == 0 {
        return Err(ProtocolError::InvalidConfig("round counter must start at 1".into()));
    }
    controlled_step(instance, outcome, config, state, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub round: usize,
    pub step: f64,
    pub max_increment: f64,
    pub migrations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlledTrace {
    pub trace: Trace,
    pub steps: Vec<StepRecord>,
    pub final_state: UtilityState,
}

/// Controlled run: rounds until a quiet round passes a full scan under the
/// controlled test on that round's latencies, or the cap is hit.
pub fn run_controlled<R: Rng + ?Sized>(
    instance: &Instance,
    initial: &Outcome,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<ControlledTrace, ProtocolError> {
    config.validate()?;
    let mut state = UtilityState::measured(instance, initial)?;
    let initial_cost = Snapshot::new(instance, initial)?.social_cost(&config.reg);
    let cap = config.round_cap(instance);
    let mut outcome = initial.clone();
    let mut rounds = Vec::new();
    let mut steps = Vec::new();
    let mut scans = 0;
    let mut termination = Termination::RoundCap;
    let mut final_cost = initial_cost;

    for k in 1..=cap {
        let r = controlled_step(instance, &outcome, config, &mut state, rng)?;
        let snap = Snapshot::new(&r.instance, &r.outcome)?;
        final_cost = snap.social_cost(&config.reg);
        steps.push(StepRecord {
            round: k,
            step: r.step,
            max_increment: r.max_increment,
            migrations: r.migrations.len(),
        });
        let quiet = r.migrations.is_empty();
        rounds.push(RoundRecord {
            round: k,
            migrations: r.migrations,
            social_cost: final_cost,
            weights: snap.weights().to_vec(),
            assignment: snap.assignment().to_vec(),
            r: None,
        });
        outcome = r.outcome;
        if quiet {
            scans += 1;
            let ctx = TestContext {
                reg: &config.reg,
                eta: config.eta,
                cost: None,
                estimates: Some(&state.estimates),
            };
            if ctx.scan(&snap).is_none() {
                termination = Termination::Equilibrium;
                break;
            }
        }
    }

    Ok(ControlledTrace {
        trace: Trace {
            initial: initial.clone(),
            initial_cost,
            rounds,
            final_outcome: outcome,
            final_cost,
            termination,
            scans,
            cost_exchanges: 0,
        },
        steps,
        final_state: state,
    })
}
