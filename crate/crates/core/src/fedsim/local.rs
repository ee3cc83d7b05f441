//! Client-side training of one adapter on one matrix's regression data.
//!
//! The loss `mean_s ‖y − (W + B·A)·x‖²` is evaluated through the sample
//! moments `G = X·Xᵀ/s`, `C = R0·Xᵀ/s` and `c0 = ‖R0‖²/s` with
//! `R0 = Y − W·X`:
//!
//! `ℓ = c0 − 2⟨C, BA⟩ + ⟨BA·G, BA⟩`, `∇_W ℓ = −2(C − BA·G)`,
//! `∇_B = ∇_W·Aᵀ`, `∇_A = Bᵀ·∇_W`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::task::{Samples, TAG_BATCH};
use super::BatchPolicy;
use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// `A` uniform in `[−1/√r, 1/√r]`, `B = 0`.
pub fn init_local_adapter(m: usize, n: usize, r: usize, seed: u64) -> Result<LoraAdapter> {
    if r == 0 {
        return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
    }
    let bound = 1.0 / (r as f64).sqrt();
    let mut rng = seed::rng(seed, &[]);
    let a = Matrix::from_fn(r, n, |_, _| rng.random_range(-bound..=bound));
    LoraAdapter::new(Matrix::zeros(m, r), a)
}

/// Sample moments of a regression residual around a fixed base weight.
#[derive(Debug, Clone)]
pub struct Moments {
    pub g: Matrix,
    pub c: Matrix,
    pub c0: f64,
}

impl Moments {
    pub fn new(samples: &Samples, w: &Matrix) -> Result<Self> {
        let s = samples.len() as f64;
        let r0 = samples.y.sub(&w.matmul(&samples.x)?)?;
        let xt = samples.x.transpose();
        let c0 = r0.frobenius_norm().powi(2) / s;
        Ok(Self {
            g: samples.x.matmul(&xt)?.scale(1.0 / s),
            c: r0.matmul(&xt)?.scale(1.0 / s),
            c0,
        })
    }

    /// Moments of the columns listed in `idx`.
    fn subset(samples: &Samples, w: &Matrix, idx: &[usize]) -> Result<Self> {
        let x = Matrix::from_fn(samples.x.rows(), idx.len(), |i, j| samples.x.get(i, idx[j]));
        let y = Matrix::from_fn(samples.y.rows(), idx.len(), |i, j| samples.y.get(i, idx[j]));
        Self::new(&Samples { x, y }, w)
    }
}

fn inner(x: &Matrix, y: &Matrix) -> f64 {
    x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum()
}

/// Loss at `(B, A)` under the given moments.
pub fn lora_loss(mom: &Moments, b: &Matrix, a: &Matrix) -> Result<f64> {
    let w = b.matmul(a)?;
    let wg = w.matmul(&mom.g)?;
    Ok(mom.c0 - 2.0 * inner(&mom.c, &w) + inner(&wg, &w))
}

/// Loss and analytic gradients `(ℓ, ∇_B ℓ, ∇_A ℓ)`.
pub fn lora_gradients(mom: &Moments, b: &Matrix, a: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    let w = b.matmul(a)?;
    let wg = w.matmul(&mom.g)?;
    let loss = mom.c0 - 2.0 * inner(&mom.c, &w) + inner(&wg, &w);
    // ∇_W = 2(W·G − C)
    let mut grad_w = wg;
    grad_w.axpy(-1.0, &mom.c)?;
    let grad_w = grad_w.scale(2.0);
    let grad_b = grad_w.matmul(&a.transpose())?;
    let grad_a = b.transpose().matmul(&grad_w)?;
    Ok((loss, grad_b, grad_a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: BatchPolicy,
    /// FFA-LoRA: keep `A` at its initial value.
    pub freeze_a: bool,
    /// Drives mini-batch shuffling only.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub adapter: LoraAdapter,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn check(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}

fn step(mom: &Moments, b: &mut Matrix, a: &mut Matrix, opts: &LocalOptions, epoch: usize) -> Result<f64> {
    let (loss, gb, ga) = lora_gradients(mom, b, a)?;
    check(loss, epoch)?;
    b.axpy(-opts.learning_rate, &gb)?;
    if !opts.freeze_a {
        a.axpy(-opts.learning_rate, &ga)?;
    }
    Ok(loss)
}

/// Gradient descent on the client's samples around base weight `w_eff`.
pub fn local_update(
    samples: &Samples,
    w_eff: &Matrix,
    adapter: LoraAdapter,
    opts: &LocalOptions,
) -> Result<LocalResult> {
    let full = Moments::new(samples, w_eff)?;
    let (mut b, mut a) = adapter.into_parts();
    let initial_loss = lora_loss(&full, &b, &a)?;
    check(initial_loss, 0)?;
    match opts.batch {
        BatchPolicy::FullBatch => {
            for epoch in 0..opts.epochs {
                step(&full, &mut b, &mut a, opts, epoch)?;
            }
        }
        BatchPolicy::MiniBatch { size } => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            for epoch in 0..opts.epochs {
                order.shuffle(&mut seed::rng(opts.seed, &[TAG_BATCH, epoch as u64]));
                for chunk in order.chunks(size.max(1)) {
                    let mom = Moments::subset(samples, w_eff, chunk)?;
                    step(&mom, &mut b, &mut a, opts, epoch)?;
                }
            }
        }
    }
    let final_loss = lora_loss(&full, &b, &a)?;
    check(final_loss, opts.epochs)?;
    Ok(LocalResult {
        adapter: LoraAdapter::new(b, a)?,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn opts(epochs: usize, lr: f64) -> LocalOptions {
        LocalOptions {
            epochs,
            learning_rate: lr,
            batch: BatchPolicy::FullBatch,
            freeze_a: false,
            seed: 0,
        }
    }

    /// Direct per-sample loss, independent of the moment form.
    fn sample_loss(s: &Samples, w: &Matrix, b: &Matrix, a: &Matrix) -> f64 {
        let full = w.add(&b.matmul(a).unwrap()).unwrap();
        s.loss(&full).unwrap()
    }

    #[test]
    fn init_is_zero_product_and_bounded() {
        let ad = init_local_adapter(5, 100, 100, 9).unwrap();
        assert!(ad.product().unwrap().is_zero());
        assert!(ad.a().as_slice().iter().all(|x| x.abs() <= 0.1));
        assert_eq!(ad, init_local_adapter(5, 100, 100, 9).unwrap());
        assert_ne!(ad, init_local_adapter(5, 100, 100, 10).unwrap());
        assert!(init_local_adapter(5, 5, 0, 1).is_err());
    }

    #[test]
    fn moment_loss_matches_sample_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Samples {
            x: normal(6, 15, &mut rng),
            y: normal(4, 15, &mut rng),
        };
        let w = normal(4, 6, &mut rng);
        let (b, a) = (normal(4, 2, &mut rng), normal(2, 6, &mut rng));
        let mom = Moments::new(&s, &w).unwrap();
        let direct = sample_loss(&s, &w, &b, &a);
        assert!((lora_loss(&mom, &b, &a).unwrap() - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Samples {
            x: normal(6, 10, &mut rng),
            y: normal(4, 10, &mut rng),
        };
        let ad = LoraAdapter::new(normal(4, 2, &mut rng), normal(2, 6, &mut rng)).unwrap();
        let out = local_update(&s, &Matrix::zeros(4, 6), ad.clone(), &opts(5, 0.0)).unwrap();
        assert_eq!(out.adapter, ad);
    }

    #[test]
    fn frozen_a_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Samples {
            x: normal(6, 10, &mut rng),
            y: normal(4, 10, &mut rng),
        };
        let ad = init_local_adapter(4, 6, 3, 1).unwrap();
        let o = LocalOptions {
            freeze_a: true,
            ..opts(10, 0.01)
        };
        let out = local_update(&s, &Matrix::zeros(4, 6), ad.clone(), &o).unwrap();
        assert_eq!(out.adapter.a(), ad.a());
        assert!(!out.adapter.b().is_zero());
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Samples {
            x: normal(6, 10, &mut rng).scale(100.0),
            y: normal(4, 10, &mut rng),
        };
        let ad = init_local_adapter(4, 6, 3, 1).unwrap();
        match local_update(&s, &Matrix::zeros(4, 6), ad, &opts(200, 1.0)) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch > 0 && epoch <= 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mini_batches_are_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Samples {
            x: normal(6, 20, &mut rng),
            y: normal(4, 20, &mut rng),
        };
        let o = LocalOptions {
            batch: BatchPolicy::MiniBatch { size: 6 },
            ..opts(3, 0.01)
        };
        let ad = init_local_adapter(4, 6, 2, 1).unwrap();
        let run = |seed| {
            local_update(&s, &Matrix::zeros(4, 6), ad.clone(), &LocalOptions { seed, ..o })
                .unwrap()
                .adapter
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
