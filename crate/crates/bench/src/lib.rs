//! Shared fixtures for the aggregation benchmarks.

use fedlora_core::{LoraAdapter, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// One random adapter per rank, all targeting `m × n`, with uniform weights.
pub fn cohort(m: usize, n: usize, ranks: &[usize], seed: u64) -> (Vec<LoraAdapter>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapters = ranks
        .iter()
        .map(|&r| LoraAdapter::new(random_matrix(m, r, &mut rng), random_matrix(r, n, &mut rng)).expect("shapes agree"))
        .collect();
    let w = 1.0 / ranks.len() as f64;
    (adapters, vec![w; ranks.len()])
}
