//! Seeded inputs shared by the benchmarks.

use duplex_core::representation::{sparsify_ot, HybridVector, QueryRepresentation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Non-negative vocabulary activations, like a max-pooled projection.
pub fn activations(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<f32> {
    (0..vocab).map(|_| rng.gen_range(0.0f32..1.0).powi(4) * 8.0).collect()
}

pub fn documents(rng: &mut ChaCha8Rng, n: usize, dense_dim: usize, vocab: usize, k: usize) -> Vec<(String, HybridVector)> {
    (0..n)
        .map(|i| {
            let dense = uniform(rng, dense_dim);
            let sparse = sparsify_ot(&activations(rng, vocab), k).expect("k <= vocab");
            (format!("d{i}"), HybridVector { dense, sparse })
        })
        .collect()
}

pub fn query(rng: &mut ChaCha8Rng, dense_dim: usize, vocab: usize) -> QueryRepresentation {
    QueryRepresentation { dense: uniform(rng, dense_dim), mu_full: activations(rng, vocab) }
}
