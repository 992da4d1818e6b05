//! Problem instance, outcomes, and the latency / utility / cost formulas.
//!
//! Clouds form a complete graph with symmetric latencies `tau`. Each cloud
//! `x` has capacity `gamma[x]`; hosting load `L` costs a processing delay
//! `rho(x) = delta * L / (gamma[x] - L)`. The latency between VMs on clouds
//! `x` and `y` is `tau(x, y) + rho(x) + rho(y)` and a VM's utility is its
//! demand-weighted mean latency to its peers (lower is better).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regularize::Regularizer;

pub type CloudId = usize;
pub type VmId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cloud {cloud} overloaded: load {load} >= capacity {capacity}")]
    OverloadedCloud { cloud: CloudId, load: f64, capacity: f64 },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid outcome: {0}")]
    InvalidOutcome(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::InvalidInstance(msg.into()))
}

/// Immutable problem instance.
///
/// Matrices are stored row-major. Peer lists are derived from the demand
/// matrix at construction and iterate peers in increasing index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    num_clouds: usize,
    tau: Vec<f64>,
    gamma: Vec<f64>,
    delta: f64,
    num_vms: usize,
    demand: Vec<f64>,
    self_demand: Vec<f64>,
    strategy_sets: Vec<Vec<CloudId>>,
    peers: Vec<Vec<(VmId, f64)>>,
    peer_demand: Vec<f64>,
    total_demand: Vec<f64>,
}

impl Instance {
    /// Builds an instance from dense matrices. Every VM may use every
    /// cloud and has no intrinsic load; see [`Instance::with_self_demand`]
    /// and [`Instance::with_strategy_sets`].
    pub fn new(
        tau: Vec<Vec<f64>>,
        gamma: Vec<f64>,
        delta: f64,
        demand: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let m = gamma.len();
        let n = demand.len();
        if m == 0 {
            return invalid("at least one cloud is required");
        }
        if tau.len() != m || tau.iter().any(|r| r.len() != m) {
            return invalid(format!("tau must be {m}x{m}"));
        }
        if demand.iter().any(|r| r.len() != n) {
            return invalid(format!("demand must be {n}x{n}"));
        }
        let tau: Vec<f64> = tau.into_iter().flatten().collect();
        let demand: Vec<f64> = demand.into_iter().flatten().collect();
        Self::from_parts(
            m,
            tau,
            gamma,
            delta,
            n,
            demand,
            vec![0.0; n],
            vec![(0..m).collect(); n],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        m: usize,
        tau: Vec<f64>,
        gamma: Vec<f64>,
        delta: f64,
        n: usize,
        demand: Vec<f64>,
        self_demand: Vec<f64>,
        strategy_sets: Vec<Vec<CloudId>>,
    ) -> Result<Self, ModelError> {
        for x in 0..m {
            if tau[x * m + x] != 0.0 {
                return invalid(format!("tau({x},{x}) must be 0"));
            }
            for y in 0..m {
                let t = tau[x * m + y];
                if !(t >= 0.0 && t.is_finite()) {
                    return invalid(format!("tau({x},{y}) = {t} must be finite and >= 0"));
                }
                if t != tau[y * m + x] {
                    return invalid(format!("tau must be symmetric at ({x},{y})"));
                }
            }
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return invalid(format!("capacities must be positive, got {g}"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("delta must be positive, got {delta}"));
        }
        if self_demand.len() != n {
            return invalid("self_demand length must equal the number of VMs");
        }
        if let Some(s) = self_demand.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return invalid(format!("self demand must be >= 0, got {s}"));
        }
        if strategy_sets.len() != n {
            return invalid("one strategy set per VM is required");
        }
        let mut strategy_sets = strategy_sets;
        for (i, set) in strategy_sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return invalid(format!("strategy set of VM {i} is empty"));
            }
            if let Some(&x) = set.iter().find(|&&x| x >= m) {
                return invalid(format!("strategy set of VM {i} names unknown cloud {x}"));
            }
        }

        let mut peers = vec![Vec::new(); n];
        let mut peer_demand = vec![0.0; n];
        for i in 0..n {
            if demand[i * n + i] != 0.0 {
                return invalid(format!("demand({i},{i}) must be 0"));
            }
            for j in 0..n {
                let d = demand[i * n + j];
                if !(d >= 0.0 && d.is_finite()) {
                    return invalid(format!("demand({i},{j}) = {d} must be finite and >= 0"));
                }
                if d != demand[j * n + i] {
                    return invalid(format!("demand must be symmetric at ({i},{j})"));
                }
                if d > 0.0 {
                    peers[i].push((j, d));
                    peer_demand[i] += d;
                }
            }
        }
        let total_demand = peer_demand
            .iter()
            .zip(&self_demand)
            .map(|(p, s)| p + s)
            .collect();

        Ok(Self {
            num_clouds: m,
            tau,
            gamma,
            delta,
            num_vms: n,
            demand,
            self_demand,
            strategy_sets,
            peers,
            peer_demand,
            total_demand,
        })
    }

    pub fn with_self_demand(self, self_demand: Vec<f64>) -> Result<Self, ModelError> {
        let Self {
            num_clouds,
            tau,
            gamma,
            delta,
            num_vms,
            demand,
            strategy_sets,
            ..
        } = self;
        Self::from_parts(
            num_clouds,
            tau,
            gamma,
            delta,
            num_vms,
            demand,
            self_demand,
            strategy_sets,
        )
    }

    pub fn with_strategy_sets(self, sets: Vec<Vec<CloudId>>) -> Result<Self, ModelError> {
        let Self {
            num_clouds,
            tau,
            gamma,
            delta,
            num_vms,
            demand,
            self_demand,
            ..
        } = self;
        Self::from_parts(
            num_clouds,
            tau,
            gamma,
            delta,
            num_vms,
            demand,
            self_demand,
            sets,
        )
    }

    /// Same instance with a different latency matrix (validated).
    pub fn with_tau(&self, tau: Vec<f64>) -> Result<Self, ModelError> {
        if tau.len() != self.num_clouds * self.num_clouds {
            return invalid("tau has the wrong size");
        }
        Self::from_parts(
            self.num_clouds,
            tau,
            self.gamma.clone(),
            self.delta,
            self.num_vms,
            self.demand.clone(),
            self.self_demand.clone(),
            self.strategy_sets.clone(),
        )
    }

    pub fn num_clouds(&self) -> usize {
        self.num_clouds
    }

    pub fn num_vms(&self) -> usize {
        self.num_vms
    }

    #[inline]
    pub fn tau(&self, x: CloudId, y: CloudId) -> f64 {
        self.tau[x * self.num_clouds + y]
    }

    pub fn tau_matrix(&self) -> &[f64] {
        &self.tau
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn demand(&self, i: VmId, j: VmId) -> f64 {
        self.demand[i * self.num_vms + j]
    }

    pub fn self_demand(&self) -> &[f64] {
        &self.self_demand
    }

    pub fn strategy_set(&self, i: VmId) -> &[CloudId] {
        &self.strategy_sets[i]
    }

    pub fn strategy_sets(&self) -> &[Vec<CloudId>] {
        &self.strategy_sets
    }

    /// Peers of `i` with their positive demands, in index order.
    pub fn peers(&self, i: VmId) -> &[(VmId, f64)] {
        &self.peers[i]
    }

    /// Number of unordered VM pairs with positive demand.
    pub fn num_pairs(&self) -> usize {
        self.peers.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// `Σ_j d_ij`, the denominator of the weighted latency.
    pub fn peer_demand(&self, i: VmId) -> f64 {
        self.peer_demand[i]
    }

    /// `Σ_j d_ij + self_demand[i]`: the load `i` places on its host.
    #[inline]
    pub fn total_demand(&self, i: VmId) -> f64 {
        self.total_demand[i]
    }

    /// `δ L / (γ(x) - L)`.
    pub fn rho_at_load(&self, x: CloudId, load: f64) -> Result<f64, ModelError> {
        let capacity = self.gamma[x];
        if load >= capacity {
            return Err(ModelError::OverloadedCloud {
                cloud: x,
                load,
                capacity,
            });
        }
        Ok(self.delta * load / (capacity - load))
    }

    /// Checks shape and strategy-set membership (not capacity).
    pub fn check_outcome(&self, outcome: &Outcome) -> Result<(), ModelError> {
        if outcome.assignment.len() != self.num_vms {
            return Err(ModelError::InvalidOutcome(format!(
                "assignment has {} entries, expected {}",
                outcome.assignment.len(),
                self.num_vms
            )));
        }
        for (i, &x) in outcome.assignment.iter().enumerate() {
            if self.strategy_sets[i].binary_search(&x).is_err() {
                return Err(ModelError::InvalidOutcome(format!(
                    "VM {i} placed on cloud {x} outside its strategy set"
                )));
            }
        }
        Ok(())
    }

    pub fn loads(&self, outcome: &Outcome) -> Vec<f64> {
        let mut loads = vec![0.0; self.num_clouds];
        for (i, &x) in outcome.assignment.iter().enumerate() {
            loads[x] += self.total_demand[i];
        }
        loads
    }

    /// True iff every cloud's load is strictly below its capacity.
    pub fn is_feasible(&self, outcome: &Outcome) -> bool {
        self.check_outcome(outcome).is_ok()
            && self
                .loads(outcome)
                .iter()
                .zip(&self.gamma)
                .all(|(l, g)| l < g)
    }
}

/// `σ = (x_1, ..., x_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outcome {
    pub assignment: Vec<CloudId>,
}

impl Outcome {
    pub fn new(assignment: Vec<CloudId>) -> Self {
        Self { assignment }
    }

    pub fn cloud_of(&self, i: VmId) -> CloudId {
        self.assignment[i]
    }

    /// Copy with VM `i` moved to `y`.
    pub fn relocated(&self, i: VmId, y: CloudId) -> Self {
        let mut next = self.clone();
        next.assignment[i] = y;
        next
    }

    pub fn idle_clouds(&self, num_clouds: usize) -> usize {
        let mut used = vec![false; num_clouds];
        for &x in &self.assignment {
            used[x] = true;
        }
        used.iter().filter(|u| !**u).count()
    }
}

impl From<Vec<CloudId>> for Outcome {
    fn from(assignment: Vec<CloudId>) -> Self {
        Self { assignment }
    }
}

/// Demand-weighted latency of VM `i` placed at `x`, with peers at their
/// positions in `assignment` and processing delays given by `rho`.
/// `extra(j)` is added to every pair latency (zero for plain utilities).
///
/// Peer-less VMs fall back to `rho(x)`.
#[inline]
pub(crate) fn weighted_latency(
    instance: &Instance,
    assignment: &[CloudId],
    i: VmId,
    x: CloudId,
    rho: impl Fn(CloudId) -> f64,
    extra: impl Fn(VmId) -> f64,
) -> f64 {
    let peers = instance.peers(i);
    let rx = rho(x);
    if peers.is_empty() {
        return rx + extra(i);
    }
    let mut acc = 0.0;
    for &(j, d) in peers {
        let xj = assignment[j];
        acc += d * (instance.tau(x, xj) + (rx + rho(xj)) + extra(j));
    }
    acc / instance.peer_demand(i)
}

/// Cached evaluation of one outcome: loads, processing delays, current
/// utilities and cloud weights. Everything is recomputed from scratch on
/// [`Snapshot::relocate`] so values are independent of the move history.
#[derive(Debug, Clone)]
pub struct Snapshot<'a> {
    instance: &'a Instance,
    assignment: Vec<CloudId>,
    loads: Vec<f64>,
    rho: Vec<f64>,
    utilities: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Snapshot<'a> {
    pub fn new(instance: &'a Instance, outcome: &Outcome) -> Result<Self, ModelError> {
        instance.check_outcome(outcome)?;
        let mut s = Self {
            instance,
            assignment: outcome.assignment.clone(),
            loads: vec![0.0; instance.num_clouds()],
            rho: vec![0.0; instance.num_clouds()],
            utilities: vec![0.0; instance.num_vms()],
            weights: vec![0.0; instance.num_clouds()],
        };
        s.refresh()?;
        Ok(s)
    }

    /// Evaluates `outcome` against a different instance that shares the
    /// same VM set (used for jittered latencies).
    pub fn rebind<'b>(&self, instance: &'b Instance) -> Result<Snapshot<'b>, ModelError> {
        Snapshot::new(instance, &self.outcome())
    }

    fn refresh(&mut self) -> Result<(), ModelError> {
        let inst = self.instance;
        self.loads.iter_mut().for_each(|l| *l = 0.0);
        for (i, &x) in self.assignment.iter().enumerate() {
            self.loads[x] += inst.total_demand(i);
        }
        for x in 0..inst.num_clouds() {
            self.rho[x] = inst.rho_at_load(x, self.loads[x])?;
        }
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..inst.num_vms() {
            let x = self.assignment[i];
            let u = weighted_latency(inst, &self.assignment, i, x, |c| self.rho[c], |_| 0.0);
            self.utilities[i] = u;
            self.weights[x] += u;
        }
        Ok(())
    }

    /// Moves VM `i` to `y` and re-evaluates. On overload the snapshot is
    /// left unchanged.
    pub fn relocate(&mut self, i: VmId, y: CloudId) -> Result<(), ModelError> {
        let from = self.assignment[i];
        self.assignment[i] = y;
        if let Err(e) = self.refresh() {
            self.assignment[i] = from;
            self.refresh().expect("previous outcome was feasible");
            return Err(e);
        }
        Ok(())
    }

    pub fn instance(&self) -> &'a Instance {
        self.instance
    }

    pub fn assignment(&self) -> &[CloudId] {
        &self.assignment
    }

    pub fn outcome(&self) -> Outcome {
        Outcome::new(self.assignment.clone())
    }

    pub fn loads(&self) -> &[f64] {
        &self.loads
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn utilities(&self) -> &[f64] {
        &self.utilities
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn utility(&self, i: VmId) -> f64 {
        self.utilities[i]
    }

    pub fn weight(&self, x: CloudId) -> f64 {
        self.weights[x]
    }

    /// Processing delays of source and target if `i` moved to `y`.
    /// Errors when `y` would be overloaded.
    pub fn anticipated_rho(&self, i: VmId, y: CloudId) -> Result<(CloudId, f64, f64), ModelError> {
        let x = self.assignment[i];
        let d = self.instance.total_demand(i);
        let rho_y = self.instance.rho_at_load(y, self.loads[y] + d)?;
        let rho_x = self.instance.rho_at_load(x, (self.loads[x] - d).max(0.0))?;
        Ok((x, rho_x, rho_y))
    }

    /// `u_i(y)` on the hypothetical outcome where only `i` moved to `y`.
    /// Equals the current utility when `y` is the current cloud.
    pub fn anticipated_utility(&self, i: VmId, y: CloudId) -> Result<f64, ModelError> {
        self.anticipated_utility_with(i, y, |_| 0.0)
    }

    /// As [`Snapshot::anticipated_utility`] with `extra(j)` added to each
    /// pair latency (`extra(i)` for a peer-less VM).
    pub fn anticipated_utility_with(
        &self,
        i: VmId,
        y: CloudId,
        extra: impl Fn(VmId) -> f64,
    ) -> Result<f64, ModelError> {
        let x = self.assignment[i];
        if y == x {
            return Ok(weighted_latency(
                self.instance,
                &self.assignment,
                i,
                y,
                |c| self.rho[c],
                extra,
            ));
        }
        let (_, rho_x, rho_y) = self.anticipated_rho(i, y)?;
        let rho = |c: CloudId| {
            if c == y {
                rho_y
            } else if c == x {
                rho_x
            } else {
                self.rho[c]
            }
        };
        Ok(weighted_latency(self.instance, &self.assignment, i, y, rho, extra))
    }

    /// `Σ_x w_x f(w_x)`.
    pub fn social_cost<R: Regularizer + ?Sized>(&self, reg: &R) -> f64 {
        self.weights
            .iter()
            .map(|&w| if w > 0.0 { w * reg.value(w) } else { 0.0 })
            .sum()
    }

    pub fn utility_sum(&self) -> f64 {
        self.utilities.iter().sum()
    }

    /// `cloud_load(x) / γ(x)` per cloud.
    pub fn utilization(&self) -> Vec<f64> {
        self.loads
            .iter()
            .zip(self.instance.gamma())
            .map(|(l, g)| l / g)
            .collect()
    }
}

// Free-standing formula evaluations. Each recomputes from the outcome
// directly; they are the reference the cached snapshot is tested against.

pub fn total_demand(instance: &Instance, i: VmId) -> f64 {
    instance.total_demand(i)
}

pub fn cloud_load(instance: &Instance, outcome: &Outcome, x: CloudId) -> f64 {
    outcome
        .assignment
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == x)
        .map(|(i, _)| instance.total_demand(i))
        .sum()
}

pub fn processing_delay(instance: &Instance, outcome: &Outcome, x: CloudId) -> Result<f64, ModelError> {
    instance.rho_at_load(x, cloud_load(instance, outcome, x))
}

pub fn pair_latency(
    instance: &Instance,
    outcome: &Outcome,
    x: CloudId,
    y: CloudId,
) -> Result<f64, ModelError> {
    let rx = processing_delay(instance, outcome, x)?;
    let ry = processing_delay(instance, outcome, y)?;
    Ok(instance.tau(x, y) + (rx + ry))
}

/// Weighted latency `u_i(x)`. With `anticipate`, delays are those
/// of the outcome in which `i` has moved to `x`.
pub fn vm_utility(
    instance: &Instance,
    outcome: &Outcome,
    i: VmId,
    x: CloudId,
    anticipate: bool,
) -> Result<f64, ModelError> {
    let hypothetical;
    let eval_on = if anticipate {
        hypothetical = outcome.relocated(i, x);
        &hypothetical
    } else {
        outcome
    };
    let peers = instance.peers(i);
    if peers.is_empty() {
        return processing_delay(instance, eval_on, x);
    }
    let mut acc = 0.0;
    for &(j, d) in peers {
        acc += d * pair_latency(instance, eval_on, x, eval_on.assignment[j])?;
    }
    Ok(acc / instance.peer_demand(i))
}

pub fn cloud_weight(instance: &Instance, outcome: &Outcome, x: CloudId) -> Result<f64, ModelError> {
    let mut w = 0.0;
    for (i, &c) in outcome.assignment.iter().enumerate() {
        if c == x {
            w += vm_utility(instance, outcome, i, x, false)?;
        }
    }
    Ok(w)
}

pub fn social_cost<R: Regularizer + ?Sized>(
    instance: &Instance,
    outcome: &Outcome,
    reg: &R,
) -> Result<f64, ModelError> {
    let mut c = 0.0;
    for x in 0..instance.num_clouds() {
        let w = cloud_weight(instance, outcome, x)?;
        if w > 0.0 {
            c += w * reg.value(w);
        }
    }
    Ok(c)
}
