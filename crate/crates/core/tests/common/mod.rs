#![allow(dead_code)]

use fedlora_core::{LoraAdapter, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_cohort(m: usize, n: usize, ranks: &[usize], rng: &mut ChaCha8Rng) -> (Vec<LoraAdapter>, Vec<f64>) {
    let adapters = ranks
        .iter()
        .map(|&r| LoraAdapter::new(random(m, r, rng), random(r, n, rng)).unwrap())
        .collect();
    let raw: Vec<f64> = ranks.iter().map(|_| rng.random_range(1.0..10.0)).collect();
    let total: f64 = raw.iter().sum();
    (adapters, raw.iter().map(|w| w / total).collect())
}

pub fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Singular values from nalgebra, sorted non-increasing.
pub fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    (0..len)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}
