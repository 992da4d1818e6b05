//! Random instances, initial placements, and the load-balancing / energy
//! presets with their ideal comparators.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CloudId, Instance, ModelError, Outcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("no feasible assignment found")]
    NoFeasibleAssignment,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub m: usize,
    pub n: usize,
    pub tau_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub d_range: (f64, f64),
    /// Probability that a VM pair communicates.
    pub edge_prob: f64,
    /// When set, overrides `edge_prob` with `min(1, mean_degree / (n - 1))`.
    pub mean_degree: Option<f64>,
    pub delta: f64,
    /// Off-diagonal latency of the energy preset.
    pub tau_big: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            m: 5,
            n: 8,
            tau_range: (10.0, 100.0),
            gamma_range: (50.0, 100.0),
            d_range: (1.0, 10.0),
            edge_prob: 0.5,
            mean_degree: None,
            delta: 1.0,
            tau_big: 1e6,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidParams(m));
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("tau_range", self.tau_range),
            ("gamma_range", self.gamma_range),
            ("d_range", self.d_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be positive and ordered, got ({lo}, {hi})"));
            }
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge_prob must lie in [0, 1], got {}", self.edge_prob));
        }
        if let Some(md) = self.mean_degree {
            if !(md >= 0.0 && md.is_finite()) {
                return bad(format!("mean_degree must be >= 0, got {md}"));
            }
        }
        if !(self.delta > 0.0) || !(self.tau_big > 0.0 && self.tau_big.is_finite()) {
            return bad("delta and tau_big must be positive".into());
        }
        Ok(())
    }

    pub fn effective_edge_prob(&self) -> f64 {
        match self.mean_degree {
            Some(md) if self.n > 1 => (md / (self.n - 1) as f64).min(1.0),
            Some(_) => 0.0,
            None => self.edge_prob,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn complete_tau<R: Rng + ?Sized>(m: usize, rng: &mut R, mut value: impl FnMut(&mut R) -> f64) -> Vec<Vec<f64>> {
    let mut tau = vec![vec![0.0; m]; m];
    for x in 0..m {
        for y in (x + 1)..m {
            let t = value(rng);
            tau[x][y] = t;
            tau[y][x] = t;
        }
    }
    tau
}

/// Complete cloud graph with uniform latencies and capacities; a binomial
/// VM graph with uniform pair demands.
pub fn gen_random_instance(params: &GenParams) -> Result<Instance, ScenarioError> {
    params.validate()?;
    let mut rng = params.rng();
    let (m, n) = (params.m, params.n);
    let tau = complete_tau(m, &mut rng, |r| uniform(r, params.tau_range));
    let gamma = (0..m).map(|_| uniform(&mut rng, params.gamma_range)).collect();
    let p = params.effective_edge_prob();
    let mut demand = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(p) {
                let d = uniform(&mut rng, params.d_range);
                demand[i][j] = d;
                demand[j][i] = d;
            }
        }
    }
    Ok(Instance::new(tau, gamma, params.delta, demand)?)
}

/// Zero latencies and no peers; each VM carries an intrinsic load, so its
/// utility is the processing delay of its host.
pub fn preset_load_balancing(params: &GenParams) -> Result<Instance, ScenarioError> {
    params.validate()?;
    let mut rng = params.rng();
    let (m, n) = (params.m, params.n);
    let gamma = (0..m).map(|_| uniform(&mut rng, params.gamma_range)).collect();
    let self_demand = (0..n).map(|_| uniform(&mut rng, params.d_range)).collect();
    Ok(Instance::new(vec![vec![0.0; m]; m], gamma, params.delta, vec![vec![0.0; n]; n])?
        .with_self_demand(self_demand)?)
}

/// Every VM pair communicates with unit demand and distinct clouds are
/// `tau_big` apart, so VMs gather where most peers already are.
pub fn preset_energy(params: &GenParams) -> Result<Instance, ScenarioError> {
    params.validate()?;
    let mut rng = params.rng();
    let (m, n) = (params.m, params.n);
    let tau = complete_tau(m, &mut rng, |_| params.tau_big);
    let gamma = (0..m).map(|_| uniform(&mut rng, params.gamma_range)).collect();
    let mut demand = vec![vec![1.0; n]; n];
    for (i, row) in demand.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    Ok(Instance::new(tau, gamma, params.delta, demand)?)
}

const PLACEMENT_RETRIES: usize = 100;

/// Random-order placement on uniformly random feasible clouds, retried
/// over fresh permutations, then first-fit-decreasing as a fallback.
pub fn initial_assignment<R: Rng + ?Sized>(inst: &Instance, rng: &mut R) -> Result<Outcome, ScenarioError> {
    let n = inst.num_vms();
    let total: f64 = (0..n).map(|i| inst.total_demand(i)).sum();
    let capacity: f64 = inst.gamma().iter().sum();
    if n > 0 && total > 0.0 && total >= capacity {
        return Err(ScenarioError::NoFeasibleAssignment);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut options: Vec<CloudId> = Vec::with_capacity(inst.num_clouds());
    'attempt: for _ in 0..PLACEMENT_RETRIES {
        order.shuffle(rng);
        let mut loads = vec![0.0; inst.num_clouds()];
        let mut assignment = vec![0; n];
        for &i in &order {
            let d = inst.total_demand(i);
            options.clear();
            options.extend(
                inst.strategy_set(i)
                    .iter()
                    .copied()
                    .filter(|&x| loads[x] + d < inst.gamma()[x]),
            );
            let Some(&x) = options.choose(rng) else {
                continue 'attempt;
            };
            loads[x] += d;
            assignment[i] = x;
        }
        return Ok(Outcome::new(assignment));
    }
    first_fit_decreasing(inst).ok_or(ScenarioError::NoFeasibleAssignment)
}

fn first_fit_decreasing(inst: &Instance) -> Option<Outcome> {
    let n = inst.num_vms();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| inst.total_demand(b).total_cmp(&inst.total_demand(a)).then(a.cmp(&b)));
    let mut loads = vec![0.0; inst.num_clouds()];
    let mut assignment = vec![0; n];
    for i in order {
        let d = inst.total_demand(i);
        let x = inst
            .strategy_set(i)
            .iter()
            .copied()
            .find(|&x| loads[x] + d < inst.gamma()[x])?;
        loads[x] += d;
        assignment[i] = x;
    }
    let o = Outcome::new(assignment);
    inst.is_feasible(&o).then_some(o)
}

/// Utilization every cloud would have if load were spread in proportion
/// to capacity.
pub fn ideal_balanced_utilization(inst: &Instance) -> Vec<f64> {
    let total: f64 = (0..inst.num_vms()).map(|i| inst.total_demand(i)).sum();
    let capacity: f64 = inst.gamma().iter().sum();
    vec![total / capacity; inst.num_clouds()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdealIdle {
    pub idle: usize,
    /// False when packing fell back to first-fit-decreasing; `idle` is then
    /// achievable but possibly below the true maximum.
    pub exact: bool,
}

const PACKING_NODE_BUDGET: u64 = 5_000_000;

/// Most clouds that can stay empty while all VM loads fit (strictly) in the
/// rest. Exact for `n <= 10` or `m <= 12` unless the search budget runs out.
/// Assumes every VM may use every cloud.
pub fn ideal_idle_clouds(inst: &Instance) -> Result<IdealIdle, ScenarioError> {
    let m = inst.num_clouds();
    let n = inst.num_vms();
    if n == 0 {
        return Ok(IdealIdle { idle: m, exact: true });
    }
    let mut items: Vec<f64> = (0..n).map(|i| inst.total_demand(i)).collect();
    items.sort_by(|a, b| b.total_cmp(a));
    let mut caps = inst.gamma().to_vec();
    caps.sort_by(|a, b| b.total_cmp(a));

    let ffd = ffd_bins(&items, &caps);
    if n <= 10 || m <= 12 {
        // any k-subset of clouds is dominated by the k largest
        let mut nodes = 0u64;
        let upper = ffd.unwrap_or(m);
        for k in 1..=upper {
            let mut loads = vec![0.0; k];
            match pack(&items, 0, &caps[..k], &mut loads, &mut nodes) {
                Some(true) => return Ok(IdealIdle { idle: m - k, exact: true }),
                Some(false) => continue,
                None => break,
            }
        }
        if ffd.is_none() && nodes <= PACKING_NODE_BUDGET {
            return Err(ScenarioError::NoFeasibleAssignment);
        }
    }
    match ffd {
        Some(k) => Ok(IdealIdle { idle: m - k, exact: false }),
        None => Err(ScenarioError::NoFeasibleAssignment),
    }
}

fn ffd_bins(items: &[f64], caps: &[f64]) -> Option<usize> {
    let mut loads = vec![0.0; caps.len()];
    for &d in items {
        let b = (0..caps.len()).find(|&b| loads[b] + d < caps[b])?;
        loads[b] += d;
    }
    Some(loads.iter().filter(|l| **l > 0.0).count().max(1))
}

/// Backtracking feasibility of packing `items[idx..]`; `None` when the node
/// budget is exhausted.
fn pack(items: &[f64], idx: usize, caps: &[f64], loads: &mut [f64], nodes: &mut u64) -> Option<bool> {
    if idx == items.len() {
        return Some(true);
    }
    *nodes += 1;
    if *nodes > PACKING_NODE_BUDGET {
        return None;
    }
    let d = items[idx];
    for b in 0..caps.len() {
        // bins in the same state are interchangeable
        if (0..b).any(|p| loads[p] == loads[b] && caps[p] == caps[b]) {
            continue;
        }
        if loads[b] + d < caps[b] {
            loads[b] += d;
            let r = pack(items, idx + 1, caps, loads, nodes);
            loads[b] -= d;
            match r {
                Some(true) => return Some(true),
                None => return None,
                Some(false) => {}
            }
        }
    }
    Some(false)
}
