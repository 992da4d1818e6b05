//! Ground truth for small instances: the exhaustive social optimum, a Nash
//! check that does not share code paths with the round engine, and the
//! Price of Anarchy.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{self, weighted_latency, CloudId, Instance, ModelError, Outcome, VmId};
use crate::regularize::{RegFn, Regularizer};

pub const DEFAULT_BUDGET: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs {required} assignments, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },
    #[error("no feasible assignment exists")]
    NoFeasibleAssignment,
    #[error("optimum social cost is zero while the equilibrium cost is {0}")]
    DegenerateOptimum(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumResult {
    pub best_outcome: Outcome,
    pub best_cost: f64,
    /// `Σ_i u_i` at `best_outcome`.
    pub best_utility_sum: f64,
    /// Smallest `Σ_i u_i` over all feasible assignments.
    pub min_utility_sum: f64,
    pub feasible_count: u64,
    /// `Π_i |A_i|`, pruned branches included.
    pub enumerated_count: u128,
}

#[derive(Debug, Clone, PartialEq)]
struct Partial {
    best: Option<(f64, Vec<CloudId>, f64)>,
    min_usum: f64,
    feasible: u64,
}

impl Partial {
    fn empty() -> Self {
        Self {
            best: None,
            min_usum: f64::INFINITY,
            feasible: 0,
        }
    }

    /// Deterministic merge: lower cost wins, ties go to the
    /// lexicographically smaller assignment.
    fn merge(self, other: Self) -> Self {
        let best = match (self.best, other.best) {
            (None, b) | (b, None) => b,
            (Some(a), Some(b)) => {
                if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    Some(b)
                } else {
                    Some(a)
                }
            }
        };
        Self {
            best,
            min_usum: self.min_usum.min(other.min_usum),
            feasible: self.feasible + other.feasible,
        }
    }
}

/// Depth-first enumeration with per-depth load vectors (no floating-point
/// undo on backtrack, so leaf costs match a fresh evaluation bit for bit).
struct Enumerator<'a, R: Regularizer> {
    inst: &'a Instance,
    reg: &'a R,
    assignment: Vec<CloudId>,
    loads: Vec<Vec<f64>>,
    rho: Vec<f64>,
    weights: Vec<f64>,
    acc: Partial,
}

impl<'a, R: Regularizer> Enumerator<'a, R> {
    fn new(inst: &'a Instance, reg: &'a R) -> Self {
        let m = inst.num_clouds();
        let n = inst.num_vms();
        Self {
            inst,
            reg,
            assignment: vec![0; n],
            loads: vec![vec![0.0; m]; n + 1],
            rho: vec![0.0; m],
            weights: vec![0.0; m],
            acc: Partial::empty(),
        }
    }

    /// Fixes the first `prefix.len()` VMs; false if the prefix is infeasible.
    fn seed(&mut self, prefix: &[CloudId]) -> bool {
        for (i, &x) in prefix.iter().enumerate() {
            if !self.place(i, x) {
                return false;
            }
        }
        true
    }

    fn place(&mut self, i: VmId, x: CloudId) -> bool {
        let d = self.inst.total_demand(i);
        let load = self.loads[i][x] + d;
        if load >= self.inst.gamma()[x] {
            return false;
        }
        let (head, tail) = self.loads.split_at_mut(i + 1);
        tail[0].copy_from_slice(&head[i]);
        tail[0][x] = load;
        self.assignment[i] = x;
        true
    }

    fn descend(&mut self, i: VmId) {
        if i == self.inst.num_vms() {
            self.leaf();
            return;
        }
        for &x in self.inst.strategy_set(i) {
            if self.place(i, x) {
                self.descend(i + 1);
            }
        }
    }

    fn leaf(&mut self) {
        let inst = self.inst;
        let loads = &self.loads[inst.num_vms()];
        for x in 0..inst.num_clouds() {
            self.rho[x] = inst
                .rho_at_load(x, loads[x])
                .expect("pruned assignments are feasible");
        }
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        let mut usum = 0.0;
        for i in 0..inst.num_vms() {
            let x = self.assignment[i];
            let u = weighted_latency(inst, &self.assignment, i, x, |c| self.rho[c], |_| 0.0);
            self.weights[x] += u;
            usum += u;
        }
        let cost: f64 = self
            .weights
            .iter()
            .map(|&w| if w > 0.0 { w * self.reg.value(w) } else { 0.0 })
            .sum();
        self.acc.feasible += 1;
        self.acc.min_usum = self.acc.min_usum.min(usum);
        // enumeration is lexicographic, so strict improvement keeps the
        // smallest assignment among ties
        if self.acc.best.as_ref().is_none_or(|b| cost < b.0) {
            self.acc.best = Some((cost, self.assignment.clone(), usum));
        }
    }
}

/// Assignments of the first VMs, used as independent work units.
fn prefixes(inst: &Instance, target_units: usize) -> Vec<Vec<CloudId>> {
    let mut out = vec![Vec::new()];
    for i in 0..inst.num_vms() {
        if out.len() >= target_units {
            break;
        }
        out = out
            .into_iter()
            .flat_map(|p| {
                inst.strategy_set(i).iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn enumeration_size(inst: &Instance) -> u128 {
    inst.strategy_sets()
        .iter()
        .map(|s| s.len() as u128)
        .try_fold(1u128, |acc, k| acc.checked_mul(k))
        .unwrap_or(u128::MAX)
}

pub fn brute_force_optimum<R: Regularizer>(inst: &Instance, reg: &R) -> Result<OptimumResult, OracleError> {
    brute_force_optimum_with_budget(inst, reg, DEFAULT_BUDGET)
}

/// Exact minimizer of the social cost over all feasible assignments.
pub fn brute_force_optimum_with_budget<R: Regularizer>(
    inst: &Instance,
    reg: &R,
    budget: u128,
) -> Result<OptimumResult, OracleError> {
    let required = enumeration_size(inst);
    if required > budget {
        return Err(OracleError::BudgetExceeded { required, budget });
    }
    let units = if required > 4096 { prefixes(inst, 256) } else { vec![Vec::new()] };
    let total = units
        .par_iter()
        .map(|prefix| {
            let mut e = Enumerator::new(inst, reg);
            if e.seed(prefix) {
                e.descend(prefix.len());
            }
            e.acc
        })
        .reduce(Partial::empty, Partial::merge);
    let (best_cost, best, best_utility_sum) = total.best.ok_or(OracleError::NoFeasibleAssignment)?;
    Ok(OptimumResult {
        best_outcome: Outcome::new(best),
        best_cost,
        best_utility_sum,
        min_utility_sum: total.min_usum,
        feasible_count: total.feasible,
        enumerated_count: required,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashVerdict {
    pub holds: bool,
    pub witness: Option<(VmId, CloudId)>,
}

/// Checks that no VM passes the migration test at threshold `eta`, using
/// the reference formula functions on explicit hypothetical outcomes.
pub fn verify_eta_nash(
    inst: &Instance,
    outcome: &Outcome,
    reg: &RegFn,
    eta: f64,
) -> Result<NashVerdict, OracleError> {
    inst.check_outcome(outcome)?;
    let weights = (0..inst.num_clouds())
        .map(|x| model::cloud_weight(inst, outcome, x))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..inst.num_vms() {
        let x = outcome.assignment[i];
        let u_x = model::vm_utility(inst, outcome, i, x, false)?;
        let raw = u_x * reg.value((weights[x] - u_x).max(0.0));
        let stay = eta * raw;
        for &y in inst.strategy_set(i) {
            if y == x {
                continue;
            }
            let u_y = match model::vm_utility(inst, outcome, i, y, true) {
                Ok(u) => u,
                Err(ModelError::OverloadedCloud { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let target = u_y * reg.value(weights[y] + u_y);
            if target <= stay && (eta >= 1.0 || target < raw) {
                return Ok(NashVerdict {
                    holds: false,
                    witness: Some((i, y)),
                });
            }
        }
    }
    Ok(NashVerdict {
        holds: true,
        witness: None,
    })
}

/// Exact Nash check (threshold 1).
pub fn verify_nash(inst: &Instance, outcome: &Outcome, reg: &RegFn) -> Result<bool, OracleError> {
    Ok(verify_eta_nash(inst, outcome, reg, 1.0)?.holds)
}

/// `C(σ_NE) / C(σ*)` against a precomputed optimum.
pub fn poa_against(
    inst: &Instance,
    ne: &Outcome,
    reg: &RegFn,
    optimum: &OptimumResult,
) -> Result<f64, OracleError> {
    let c = model::social_cost(inst, ne, reg)?;
    if optimum.best_cost == 0.0 {
        return if c == 0.0 { Ok(1.0) } else { Err(OracleError::DegenerateOptimum(c)) };
    }
    Ok(c / optimum.best_cost)
}

pub fn price_of_anarchy(inst: &Instance, ne: &Outcome, reg: &RegFn) -> Result<f64, OracleError> {
    let opt = brute_force_optimum(inst, reg)?;
    poa_against(inst, ne, reg, &opt)
}
