//! Shared fixtures for the benchmarks.

use fedho::dataset::Scenario;
use fedho::topology::build_region;
use fedho::{ChannelParams, MobilityConfig, SnrTrace, TopologyConfig, WindowConfig};

/// Default region for seed `seed`.
pub fn scenario(seed: u64) -> Scenario {
    let topology = build_region(&TopologyConfig::default(), seed).expect("default topology places");
    Scenario::new(topology, ChannelParams::default(), MobilityConfig::default(), WindowConfig::default(), seed)
        .expect("default scenario is valid")
}

/// `count` traversal traces alternating between the two roads.
pub fn traces(scenario: &Scenario, count: u64, seed: u64) -> Vec<SnrTrace> {
    (0..count)
        .map(|i| scenario.traversal((i % 2) as usize, fedho::rng::derive_seed(seed, "bench", i)).expect("traversal").trace)
        .collect()
}
