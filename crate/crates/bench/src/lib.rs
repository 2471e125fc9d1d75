//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
pub use rarelm_core::{LossSpec, ModelConfig, ModelParams};

pub fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random `(inputs, targets)` of `batch × block` ids below `vocab`.
pub fn token_batch(batch: usize, block: usize, vocab: usize, seed: u64) -> (Vec<u16>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u16> = (0..batch * block + 1).map(|_| rng.random_range(0..vocab as u16)).collect();
    (ids[..batch * block].to_vec(), ids[1..].to_vec())
}

/// The training configuration with the 128-token bilingual vocabulary.
pub fn train_config() -> ModelConfig {
    ModelConfig::small(128)
}
