//! Decentralized VM placement across federated clouds.
//!
//! VMs that exchange traffic pick host clouds selfishly to minimize their
//! average pairwise latency (network delay plus congestion-dependent
//! processing delay). A regularized migration test drives the system to an
//! approximate Nash equilibrium whose social cost is within a provable
//! factor of the optimum.
//!
//! * [`model`]: instances, outcomes, utilities, social cost
//! * [`regularize`]: the regularizer and price-of-anarchy bound
//! * [`protocol`]: migration test, rounds, controlled variant
//! * [`cost`]: migration-cost accounting
//! * [`oracle`]: exhaustive optimum and equilibrium checks
//! * [`scenarios`]: generators, presets, ideal comparators
//! * [`experiments`]: trial farm and summaries

pub mod cost;
pub mod experiments;
pub mod instance_file;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod regularize;
pub mod scenarios;

pub use cost::{CostConfig, CostShape, CostState, CostVariant};
pub use model::{CloudId, Instance, ModelError, Outcome, Snapshot, VmId};
pub use oracle::{brute_force_optimum, price_of_anarchy, verify_eta_nash, OptimumResult};
pub use protocol::{
    migration_test, run, run_controlled, Decision, ProtocolConfig, Termination, Trace,
};
pub use regularize::{poa_bound, required_lambda, theorem2_lambda, PoaBound, RegFn, Regularizer};
pub use scenarios::{gen_random_instance, initial_assignment, GenParams};
