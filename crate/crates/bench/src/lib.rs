//! Shared fixtures for the kernel benchmarks.

use recon_core::experiments::{ExperimentConfig, Problem};
use recon_core::AlgorithmConfig;

/// The desk-scale high-count problem with the shipped algorithm settings,
/// built without touching the matrix cache on disk.
pub fn desk_problem() -> (ExperimentConfig, Problem) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/uniform-high-count-desk.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref()).expect("shipped desk config loads");
    cfg.outputs.matrix_cache = None;
    let problem = Problem::build(&cfg).expect("desk problem builds");
    (cfg, problem)
}

/// The configured entry with the given label, e.g. `SDP-P2(24)`.
pub fn algorithm(cfg: &ExperimentConfig, label: &str) -> AlgorithmConfig {
    cfg.algorithms
        .iter()
        .map(|e| e.algorithm())
        .find(|a| a.label() == label)
        .unwrap_or_else(|| panic!("no {label} in config"))
}
