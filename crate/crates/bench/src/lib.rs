//! Shared fixtures for the criterion benchmarks.

use linkage_core::blcm::{ConstraintMode, GibbsSettings};
use linkage_core::pattern::BlockData;
use linkage_core::synth::{generate, SynthConfig};

/// Desk-scale scenario-1 blocks with a fixed seed.
pub fn scenario1_blocks(s: usize) -> Vec<BlockData> {
    let config = SynthConfig {
        s,
        ..SynthConfig::scenario1_defaults(1)
    };
    generate(&config).unwrap().blocks
}

/// Desk-scale scenario-2 blocks with a fixed seed.
pub fn scenario2_blocks(s: usize) -> Vec<BlockData> {
    let config = SynthConfig {
        s,
        ..SynthConfig::scenario2_defaults(1)
    };
    generate(&config).unwrap().blocks
}

/// Short single-chain sampler settings sized for benchmarking.
pub fn bench_gibbs(sweeps: usize) -> GibbsSettings {
    GibbsSettings {
        n_chains: 1,
        burn_in: 0,
        n_keep: sweeps,
        thin: 1,
        seed: 1,
        constraint_mode: ConstraintMode::Reject,
        cap: None,
    }
}
