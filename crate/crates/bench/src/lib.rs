//! Workloads shared by the benchmarks.

use dpadmm_core::model::{AgentData, ParamMatrix, ProblemDims};
use dpadmm_core::validation::SyntheticSpec;

/// Synthetic agents plus a dense parameter matrix to evaluate them at.
pub struct Workload {
    pub agents: Vec<AgentData>,
    pub dims: ProblemDims,
    pub z: ParamMatrix,
}

pub fn workload(agents: usize, rows_per_agent: usize, features: usize, classes: usize) -> Workload {
    let agents = SyntheticSpec {
        agents,
        features,
        classes,
        samples: agents * rows_per_agent,
        separation: 1.0,
        heterogeneous: false,
        seed: 1,
    }
    .generate()
    .expect("valid synthetic spec");
    let dims = ProblemDims::from_agents(&agents, 1e-6).expect("consistent agents");
    let z = ParamMatrix::from_fn(features, classes, |(j, k)| {
        ((j * 7 + k * 3) % 11) as f64 * 1e-3
    });
    Workload { agents, dims, z }
}

/// A single agent shaped like one MNIST share: `J = 784`, `K = 10`.
pub fn mnist_shaped(rows_per_agent: usize) -> Workload {
    workload(1, rows_per_agent, 784, 10)
}
