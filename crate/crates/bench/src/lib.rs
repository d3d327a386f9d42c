//! Fixtures shared by the benchmarks.

use fedskip_core::model::init_params;
use fedskip_core::{DatasetSpec, Example, ExperimentConfig, ModelSpec, ParamVector, StrategyConfig};

/// `n` deterministic examples with `d` features over `c` classes.
pub fn examples(n: usize, d: usize, c: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let features = (0..d).map(|j| ((i * 31 + j * 17) % 97) as f64 / 48.5 - 1.0).collect();
            Example::new(features, i % c)
        })
        .collect()
}

/// `k` distinct parameter vectors for `spec`.
pub fn models(spec: &ModelSpec, k: usize) -> Vec<ParamVector> {
    (0..k as u64).map(|s| init_params(spec, s)).collect()
}

/// A 20-round blob run small enough to time repeatedly.
pub fn short_run(strategy: StrategyConfig) -> ExperimentConfig {
    let mut cfg =
        ExperimentConfig::new(DatasetSpec::Blobs { num_classes: 5, input_dim: 20, n_total: 2500, class_sep: 3.0 });
    cfg.rounds = 20;
    cfg.local.epochs = 2;
    cfg.strategy = strategy;
    cfg
}
