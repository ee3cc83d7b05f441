//! Planted low-rank regression task.
//!
//! Each adapted matrix is an independent linear map: client data follow
//! `y = (W0 + ΔW*)·x + ε` with `x ~ N(0, I)` and `ε ~ N(0, σ²I)`, and
//! `ΔW* = U·V` for Gaussian `U` (`m × r*`) and `V` (`r* × n`).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ExperimentConfig;
use crate::adapters::{MatrixKey, ModelConfig};
use crate::error::Result;
use crate::seed;
use crate::tensor::Matrix;

pub(crate) const TAG_BASE: u64 = 1;
pub(crate) const TAG_PLANT: u64 = 2;
pub(crate) const TAG_DATA: u64 = 3;
pub(crate) const TAG_HOLDOUT: u64 = 4;
pub(crate) const TAG_INIT: u64 = 5;
pub(crate) const TAG_FFA: u64 = 6;
pub(crate) const TAG_BATCH: u64 = 7;

/// Column-per-sample inputs `x` (`n × s`) and targets `y` (`m × s`).
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Matrix,
    pub y: Matrix,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.cols() == 0
    }

    /// Mean squared error `mean_s ‖y − W·x‖²`.
    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        let r = self.y.sub(&w.matmul(&self.x)?)?;
        let f = r.frobenius_norm();
        Ok(f * f / self.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTask {
    pub w0: Matrix,
    pub w_star_delta: Matrix,
    /// Indexed by client position.
    pub clients: Vec<Samples>,
    pub holdout: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub model: ModelConfig,
    pub planted_rank: usize,
    pub noise: f64,
    pub matrices: BTreeMap<MatrixKey, MatrixTask>,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn key_path(tag: u64, key: MatrixKey) -> [u64; 3] {
    [tag, key.0 as u64, key.1 as u64]
}

fn draw(target: &Matrix, n: usize, samples: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Samples> {
    let x = gaussian(n, samples, 1.0, rng);
    let mut y = target.matmul(&x)?;
    if noise > 0.0 {
        y.axpy(noise, &gaussian(y.rows(), samples, 1.0, rng))?;
    }
    Ok(Samples { x, y })
}

impl SyntheticTask {
    /// Client `k`'s data depend only on `(seed, k, matrix)`, so growing the
    /// cohort leaves existing clients' samples untouched.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let model = cfg.model_config()?;
        let master = cfg.seed;
        let mut matrices = BTreeMap::new();
        for key in model.keys() {
            let (m, n) = model.dims(key);
            let w0 = gaussian(
                m,
                n,
                1.0 / (n as f64).sqrt(),
                &mut seed::rng(master, &key_path(TAG_BASE, key)),
            );
            let mut rng = seed::rng(master, &key_path(TAG_PLANT, key));
            let u = gaussian(m, cfg.planted_rank, 1.0 / (m as f64).sqrt(), &mut rng);
            let v = gaussian(cfg.planted_rank, n, 1.0 / (n as f64).sqrt(), &mut rng);
            let w_star_delta = u.matmul(&v)?;
            let target = w0.add(&w_star_delta)?;
            let clients = cfg
                .clients
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let mut rng = seed::rng(master, &[TAG_DATA, k as u64, key.0 as u64, key.1 as u64]);
                    draw(&target, n, c.dataset_size, cfg.noise, &mut rng)
                })
                .collect::<Result<_>>()?;
            let holdout = draw(
                &target,
                n,
                cfg.holdout_samples,
                cfg.noise,
                &mut seed::rng(master, &key_path(TAG_HOLDOUT, key)),
            )?;
            matrices.insert(
                key,
                MatrixTask {
                    w0,
                    w_star_delta,
                    clients,
                    holdout,
                },
            );
        }
        Ok(Self {
            model,
            planted_rank: cfg.planted_rank,
            noise: cfg.noise,
            matrices,
        })
    }

    pub fn get(&self, key: MatrixKey) -> &MatrixTask {
        &self.matrices[&key]
    }
}
