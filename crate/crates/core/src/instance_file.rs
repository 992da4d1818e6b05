//! Human-readable instance files (TOML).
//!
//! ```toml
//! num_clouds = 2
//! num_vms = 2
//! delta = 1.0
//! gamma = [100.0, 100.0]
//! # strictly lower triangle of tau: row x holds tau(x, 0), ..., tau(x, x-1)
//! tau = [[], [10.0]]
//! # optional, defaults to zeros
//! self_demand = [0.0, 0.0]
//! # optional, defaults to every cloud for every VM
//! strategy_sets = [[0, 1], [0, 1]]
//!
//! # sparse symmetric demand, one entry per unordered pair (i != j)
//! [[demand]]
//! i = 0
//! j = 1
//! d = 5.0
//! ```
//!
//! Floats are written in shortest round-trip form, so write → read is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, ModelError};

#[derive(Debug, Error)]
pub enum InstanceFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub i: usize,
    pub j: usize,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub num_clouds: usize,
    pub num_vms: usize,
    pub delta: f64,
    pub gamma: Vec<f64>,
    pub tau: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_demand: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_sets: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub demand: Vec<DemandEntry>,
}

impl From<&Instance> for InstanceFile {
    fn from(inst: &Instance) -> Self {
        let m = inst.num_clouds();
        let n = inst.num_vms();
        let tau = (0..m).map(|x| (0..x).map(|y| inst.tau(x, y)).collect()).collect();
        let mut demand = Vec::new();
        for i in 0..n {
            for &(j, d) in inst.peers(i) {
                if i < j {
                    demand.push(DemandEntry { i, j, d });
                }
            }
        }
        Self {
            num_clouds: m,
            num_vms: n,
            delta: inst.delta(),
            gamma: inst.gamma().to_vec(),
            tau,
            self_demand: Some(inst.self_demand().to_vec()),
            strategy_sets: Some(inst.strategy_sets().to_vec()),
            demand,
        }
    }
}

impl TryFrom<InstanceFile> for Instance {
    type Error = InstanceFileError;

    fn try_from(file: InstanceFile) -> Result<Self, Self::Error> {
        let m = file.num_clouds;
        let n = file.num_vms;
        let schema = |msg: String| Err(InstanceFileError::Schema(msg));
        if file.gamma.len() != m {
            return schema(format!("gamma has {} entries, expected {m}", file.gamma.len()));
        }
        if file.tau.len() != m {
            return schema(format!("tau has {} rows, expected {m}", file.tau.len()));
        }
        let mut tau = vec![vec![0.0; m]; m];
        for (x, row) in file.tau.iter().enumerate() {
            if row.len() != x {
                return schema(format!("tau row {x} must hold {x} entries"));
            }
            for (y, &t) in row.iter().enumerate() {
                tau[x][y] = t;
                tau[y][x] = t;
            }
        }
        let mut demand = vec![vec![0.0; n]; n];
        for e in &file.demand {
            if e.i >= n || e.j >= n || e.i == e.j {
                return schema(format!("demand entry ({}, {}) is out of range", e.i, e.j));
            }
            if demand[e.i][e.j] != 0.0 {
                return schema(format!("duplicate demand entry ({}, {})", e.i, e.j));
            }
            demand[e.i][e.j] = e.d;
            demand[e.j][e.i] = e.d;
        }
        let mut inst = Instance::new(tau, file.gamma, file.delta, demand)?;
        if let Some(s) = file.self_demand {
            inst = inst.with_self_demand(s)?;
        }
        if let Some(sets) = file.strategy_sets {
            inst = inst.with_strategy_sets(sets)?;
        }
        Ok(inst)
    }
}

pub fn to_toml_string(inst: &Instance) -> Result<String, InstanceFileError> {
    Ok(toml::to_string(&InstanceFile::from(inst))?)
}

pub fn from_toml_str(s: &str) -> Result<Instance, InstanceFileError> {
    let file: InstanceFile = toml::from_str(s)?;
    Instance::try_from(file)
}

pub fn write_instance(inst: &Instance, path: &Path) -> Result<(), InstanceFileError> {
    std::fs::write(path, to_toml_string(inst)?)?;
    Ok(())
}

pub fn read_instance(path: &Path) -> Result<Instance, InstanceFileError> {
    from_toml_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::e1;

    #[test]
    fn documented_example_parses() {
        let text = r#"
num_clouds = 2
num_vms = 2
delta = 1.0
gamma = [100.0, 100.0]
tau = [[], [10.0]]

[[demand]]
i = 0
j = 1
d = 5.0
"#;
        assert_eq!(from_toml_str(text).unwrap(), e1());
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad_tau = "num_clouds = 2\nnum_vms = 0\ndelta = 1.0\ngamma = [1.0, 1.0]\ntau = [[], [1.0, 2.0]]\n";
        assert!(matches!(from_toml_str(bad_tau), Err(InstanceFileError::Schema(_))));
        let self_loop = "num_clouds = 1\nnum_vms = 1\ndelta = 1.0\ngamma = [1.0]\ntau = [[]]\n[[demand]]\ni = 0\nj = 0\nd = 1.0\n";
        assert!(matches!(from_toml_str(self_loop), Err(InstanceFileError::Schema(_))));
        let unknown = "num_clouds = 1\nnum_vms = 0\ndelta = 1.0\ngamma = [1.0]\ntau = [[]]\nbogus = 3\n";
        assert!(from_toml_str(unknown).is_err());
    }

    mod props {
        use super::super::*;
        use crate::scenarios::{gen_random_instance, GenParams};
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn round_trip_is_lossless(m in 1usize..6, n in 0usize..9, p in 0.0f64..=1.0, seed in any::<u64>()) {
                let params = GenParams { m, n, edge_prob: p, seed, ..GenParams::default() };
                let inst = gen_random_instance(&params).unwrap();
                let text = to_toml_string(&inst).unwrap();
                prop_assert_eq!(from_toml_str(&text).unwrap(), inst);
            }
        }
    }
}
