//! Shared fixtures for the benchmarks.

use tgcnet::config::{EnvName, RunConfig, Variant};

/// Hallway run small enough to start updating after a few episodes.
pub fn bench_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::new(variant, 7, EnvName::Hallway);
    cfg.train.batch_size = 8;
    cfg.train.total_steps = usize::MAX / 2;
    cfg.output.checkpoint_interval = 0;
    cfg
}
