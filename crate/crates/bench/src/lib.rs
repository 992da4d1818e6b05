//! Fixtures shared by the benchmarks.

use flock_core::scenarios::{gen_random_instance, GenParams};
use flock_core::Instance;

/// Random instance with the generator defaults and `m` clouds, `n` VMs.
pub fn instance(m: usize, n: usize, seed: u64) -> Instance {
    let params = GenParams {
        m,
        n,
        seed,
        ..GenParams::default()
    };
    gen_random_instance(&params).expect("bench fixture parameters are valid")
}

/// Sparse instance for the larger benchmarks, keeping per-VM demand bounded.
pub fn sparse_instance(m: usize, n: usize, seed: u64) -> Instance {
    let params = GenParams {
        m,
        n,
        mean_degree: Some(3.5),
        seed,
        ..GenParams::default()
    };
    gen_random_instance(&params).expect("bench fixture parameters are valid")
}
