//! Benchmark fixtures. The benches themselves live in `benches/`.

use cdds_core::{generate_synthetic, EmbeddingBatch, SyntheticConfig, TrainConfig};

/// A small synthetic set of `pairs` items at width `d`.
pub fn synthetic(pairs: usize, d: usize) -> EmbeddingBatch {
    let cfg = SyntheticConfig { n_pairs: pairs, d, seed: 7, ..SyntheticConfig::default() };
    generate_synthetic(&cfg).expect("valid synthetic config").0
}

pub fn train_config(d: usize) -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: 8, learning_rate: 1e-3, ..TrainConfig::default() };
    cfg.decoupler.d = d;
    cfg
}
