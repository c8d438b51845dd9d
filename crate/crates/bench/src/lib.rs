//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n * dim` values uniform in [-1, 1).
pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Slots `0..n_domains` assigned round-robin.
pub fn round_robin(n: usize, n_domains: usize) -> Vec<usize> {
    (0..n).map(|i| i % n_domains).collect()
}
