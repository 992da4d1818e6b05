//! Migration-cost accounting.
//!
//! Each VM keeps a forgetting average `R_i ∈ [0, 1]` of its recent
//! migrations. Two ways to discourage churn build on it:
//!
//! * **penalty**: target-side pair latencies grow by `C_i(R_i) + C_j(R_j)`;
//! * **adaptive-eta**: VM `i` uses its own threshold `η_i = exp(-R_i)`.

use serde::{Deserialize, Serialize};

use crate::model::{CloudId, Instance, ModelError, Outcome, Snapshot, VmId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostVariant {
    #[default]
    None,
    Penalty,
    AdaptiveEta,
}

impl std::str::FromStr for CostVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "penalty" => Ok(Self::Penalty),
            "adaptive-eta" => Ok(Self::AdaptiveEta),
            other => Err(format!("unknown cost variant '{other}' (none | penalty | adaptive-eta)")),
        }
    }
}

impl std::fmt::Display for CostVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Penalty => "penalty",
            Self::AdaptiveEta => "adaptive-eta",
        })
    }
}

/// Shape of the increasing cost function `C_i(R)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostShape {
    /// `c_i · R`
    #[default]
    Linear,
    /// `c_i · R²`
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub variant: CostVariant,
    pub beta: f64,
    /// Cost coefficient in milliseconds per unit of `R`.
    pub coeff: f64,
    pub shape: CostShape,
    /// Per-VM overrides of `beta`.
    pub beta_per_vm: Option<Vec<f64>>,
    /// Per-VM overrides of `coeff`.
    pub coeff_per_vm: Option<Vec<f64>>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            variant: CostVariant::None,
            beta: 0.9,
            coeff: 10.0,
            shape: CostShape::Linear,
            beta_per_vm: None,
            coeff_per_vm: None,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), String> {
        let betas = self.beta_per_vm.iter().flatten().chain(std::iter::once(&self.beta));
        for b in betas {
            if !(0.0..=1.0).contains(b) {
                return Err(format!("beta must lie in [0, 1], got {b}"));
            }
        }
        let coeffs = self.coeff_per_vm.iter().flatten().chain(std::iter::once(&self.coeff));
        for c in coeffs {
            if !(*c >= 0.0 && c.is_finite()) {
                return Err(format!("cost coefficient must be >= 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn state(&self, num_vms: usize) -> CostState {
        let pick = |per: &Option<Vec<f64>>, default: f64| match per {
            Some(v) if v.len() == num_vms => v.clone(),
            _ => vec![default; num_vms],
        };
        CostState {
            r: vec![0.0; num_vms],
            beta: pick(&self.beta_per_vm, self.beta),
            coeff: pick(&self.coeff_per_vm, self.coeff),
            shape: self.shape,
        }
    }
}

/// Per-VM forgetting averages and cost parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostState {
    r: Vec<f64>,
    beta: Vec<f64>,
    coeff: Vec<f64>,
    shape: CostShape,
}

impl CostState {
    pub fn new(num_vms: usize, beta: f64, coeff: f64) -> Self {
        Self {
            r: vec![0.0; num_vms],
            beta: vec![beta; num_vms],
            coeff: vec![coeff; num_vms],
            shape: CostShape::Linear,
        }
    }

    pub fn with_r(mut self, r: Vec<f64>) -> Self {
        assert_eq!(r.len(), self.r.len());
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        self.r = r;
        self
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// `R_i ← β_i R_i + (1 - β_i) g_i`.
    pub fn update_r(&mut self, migrated: &[bool]) {
        for ((r, &b), &g) in self.r.iter_mut().zip(&self.beta).zip(migrated) {
            let g = if g { 1.0 } else { 0.0 };
            *r = (b * *r + (1.0 - b) * g).clamp(0.0, 1.0);
        }
    }

    pub fn migration_cost(&self, i: VmId) -> f64 {
        let r = self.r[i];
        match self.shape {
            CostShape::Linear => self.coeff[i] * r,
            CostShape::Quadratic => self.coeff[i] * r * r,
        }
    }

    /// `η_i = exp(-R_i) ∈ [exp(-1), 1]`.
    pub fn adaptive_eta(&self, i: VmId) -> f64 {
        (-self.r[i]).exp()
    }
}

/// `l'(y, x_j) = l(y, x_j) + C_i + C_j`, with `l` evaluated on the outcome
/// where `i` has moved to `y`.
pub fn penalized_latency(
    instance: &Instance,
    outcome: &Outcome,
    state: &CostState,
    i: VmId,
    y: CloudId,
    j: VmId,
) -> Result<f64, ModelError> {
    let hypothetical = outcome.relocated(i, y);
    let l = crate::model::pair_latency(instance, &hypothetical, y, hypothetical.assignment[j])?;
    Ok(l + (state.migration_cost(i) + state.migration_cost(j)))
}

/// Target-side utility with penalized latencies.
pub(crate) fn penalized_utility(
    snap: &Snapshot<'_>,
    state: &CostState,
    i: VmId,
    y: CloudId,
) -> Result<f64, ModelError> {
    let ci = state.migration_cost(i);
    snap.anticipated_utility_with(i, y, |j| if j == i { ci } else { ci + state.migration_cost(j) })
}
