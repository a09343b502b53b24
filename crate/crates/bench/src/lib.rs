//! Shared fixtures for the benchmark targets.

use panelsynth::dgp::{simulate_panel, DgpConfig, SimulatedPanel};

/// A mid-sized well-behaved panel reused across benchmarks.
pub fn bench_panel(n_per_arm: usize, seed: u64) -> SimulatedPanel {
    let mut config = DgpConfig::baseline(seed);
    config.n_treated = n_per_arm;
    config.n_control = n_per_arm;
    simulate_panel(&config).expect("baseline config is valid")
}
