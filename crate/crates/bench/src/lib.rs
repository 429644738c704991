//! Shared fixtures for the benchmarks in `benches/`.

use slacc::simulation::{generate_dataset, make_truth, replicate_rng, ScenarioSpec};
use slacc::{ConnectivityDataset, ParameterSet};

pub struct Fixture {
    pub data: ConnectivityDataset,
    pub theta: ParameterSet,
}

/// One scenario-1 dataset of `n` subjects with its true parameters.
pub fn fixture(n: usize, seed: u64) -> Fixture {
    let spec = ScenarioSpec::standard(1, n, seed);
    let truth = make_truth(&spec).expect("standard scenario is valid");
    let sim = generate_dataset(&truth, &spec, &mut replicate_rng(seed, n, 0)).expect("generation succeeds");
    Fixture {
        data: sim.data,
        theta: sim.theta,
    }
}
