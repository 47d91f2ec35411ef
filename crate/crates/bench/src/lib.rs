//! Shared fixtures for the benchmarks.

use openmatch_core::data::{gen_synthetic, Dataset, GenConfig};
use openmatch_core::rng::seeded;
use openmatch_core::{Tensor, TrainConfig};
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed, 0);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `n` scores with roughly 40% outliers and heavy ties.
pub fn random_scores(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = seeded(seed, 0);
    (0..n)
        .map(|_| (rng.random_range(0..1000) as f64 / 1000.0, rng.random_bool(0.4)))
        .collect()
}

pub fn default_dataset() -> Dataset {
    gen_synthetic(&GenConfig::default(), 0).expect("default generator config is feasible")
}

/// One epoch of one iteration on the default architecture.
pub fn single_step_config() -> TrainConfig {
    TrainConfig {
        e_fix: 1,
        e_max: 1,
        i_max: 1,
        ..TrainConfig::default()
    }
}
