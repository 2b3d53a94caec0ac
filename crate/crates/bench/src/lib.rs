//! Shared fixtures for the criterion benchmarks.

use entrokv::harness::{generate_workload, Workload, WorkloadSpec};
use entrokv::{Model, ModelConfig};

/// Toy model of the needle suite's shape and a 256-token workload with three needles.
pub fn needle_setup(seed: u64) -> (Model, Workload) {
    let model = Model::new(ModelConfig::new(8, 4, 64, seed).expect("valid shape")).expect("valid model");
    let spec = WorkloadSpec {
        seed,
        needles: 3,
        ..WorkloadSpec::default()
    };
    let workload = generate_workload(&spec, &model).expect("valid workload");
    (model, workload)
}
