//! Desk-scale federated fine-tuning loop.
//!
//! Every round, each client trains a fresh adapter of its own rank against
//! its merged base copy, uploads it through a byte-counting [`Channel`], and
//! the server aggregates per method. The aggregate is broadcast the same
//! way and merged into every client's base before the next round.

mod channel;
pub mod config;
mod local;
mod report;
mod task;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use channel::{Channel, Direction, WireFormat};
pub use config::{
    presets, BatchPolicy, ClientSpec, CompareSpec, CostSpec, ExperimentConfig, ModelSpec, ProjectionSpec, SweepSpec,
};
pub use local::{
    init_local_adapter, local_update, lora_gradients, lora_loss, LocalOptions, LocalResult, Moments, DIVERGENCE_LOSS,
};
pub use report::{
    write_compare_csv, write_rank_csv, write_rounds_csv, write_spectra_csv, write_sweep_csv, CompareRow, RankReport,
    RankRow, SpectrumRow, SweepRow,
};
pub use task::{MatrixTask, Samples, SyntheticTask};

use crate::adapters::{
    cohort_weights, zero_pad, AdapterLayerSet, ClientConfig, GlobalAdapter, LoraAdapter, MatrixKey, ModelConfig,
};
use crate::aggregation::{
    aggregate_model_with, oracle_delta_w, AggregateOutput, Method, ModelAggregate, ThresholdPolicy,
};
use crate::costmodel::{comm_cost, cost_report, CostReport, CostScenario};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;
use task::{TAG_BATCH, TAG_FFA, TAG_INIT};

/// One client's full set of (merged) weight matrices.
pub type Weights = BTreeMap<MatrixKey, Matrix>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based.
    pub round: usize,
    pub method: Method,
    /// Rank of the published update per `(layer, projection)`, layer-major:
    /// `p_l` for FLoRIST, the padded or stacked rank otherwise.
    pub layer_ranks: Vec<usize>,
    /// `‖published − Σ w_k B_k A_k‖_F` over all matrices.
    pub recon_error: f64,
    pub recon_error_rel: f64,
    /// Mean held-out loss of the merged models, over clients and matrices.
    pub holdout_loss: f64,
    /// Mean final local training loss.
    pub train_loss: f64,
    pub measured_upload_bytes: u64,
    pub measured_download_bytes: u64,
    pub cost: CostReport,
    /// Root of this round's adapter-initialization streams.
    pub round_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub logs: Vec<RoundLog>,
    pub final_aggregate: ModelAggregate,
    /// Per client, after the last merge.
    pub weights: Vec<Weights>,
}

/// `W0 + B_g·A_g`.
pub fn merge_global(w0: &Matrix, global: &GlobalAdapter) -> Result<Matrix> {
    let mut w = w0.clone();
    merge_into(&mut w, &global.b_g, &global.a_g)?;
    Ok(w)
}

fn merge_into(w: &mut Matrix, b: &Matrix, a: &Matrix) -> Result<()> {
    if (b.rows(), a.cols()) != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "merge",
            left: w.shape(),
            right: (b.rows(), a.cols()),
        });
    }
    if b.cols() == 0 {
        return Ok(());
    }
    w.axpy(1.0, &b.matmul(a)?)
}

/// Seed of client `client`'s fresh adapter for `key` in `round`.
pub fn init_seed(master: u64, client: usize, round: usize, key: MatrixKey) -> u64 {
    seed::derive(
        master,
        &[TAG_INIT, client as u64, round as u64, key.0 as u64, key.1 as u64],
    )
}

/// Shared frozen `A` for FFA-LoRA, `rank × n`; clients use its leading rows.
pub fn ffa_a_init(master: u64, key: MatrixKey, rank: usize, n: usize) -> Result<Matrix> {
    let s = seed::derive(master, &[TAG_FFA, key.0 as u64, key.1 as u64]);
    Ok(init_local_adapter(1, n, rank, s)?.into_parts().1)
}

/// Immutable state shared by every client in a run.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a SyntheticTask,
    model: ModelConfig,
    clients: Vec<ClientConfig>,
    method: Method,
    max_rank: usize,
    a_init: BTreeMap<MatrixKey, Matrix>,
    format: WireFormat,
}

struct Upload {
    set: AdapterLayerSet,
    train_loss: f64,
    bytes: u64,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig, task: &'a SyntheticTask, method: Method) -> Result<Self> {
        let model = task.model.clone();
        let clients = cfg.client_configs();
        let max_rank = clients.iter().map(|c| c.rank).max().unwrap_or(0);
        let mut a_init = BTreeMap::new();
        if method == Method::FfaLora {
            for key in model.keys() {
                a_init.insert(key, ffa_a_init(cfg.seed, key, max_rank, model.dims(key).1)?);
            }
        }
        if matches!(method, Method::FedIt | Method::FfaLora) && clients.iter().any(|c| c.rank != max_rank) {
            log::warn!("{method}: heterogeneous ranks zero-padded to {max_rank}");
        }
        let format = WireFormat::from_bytes_per_param(model.bytes_per_param())?;
        Ok(Self {
            cfg,
            task,
            model,
            clients,
            method,
            max_rank,
            a_init,
            format,
        })
    }

    fn map_clients<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        if self.cfg.parallel {
            (0..self.clients.len()).into_par_iter().map(f).collect()
        } else {
            (0..self.clients.len()).map(f).collect()
        }
    }

    /// Local training and upload for client `k`.
    fn train(&self, k: usize, round: usize, base: &Weights) -> Result<Upload> {
        let rank = self.clients[k].rank;
        let mut channel = Channel::new(self.format, self.cfg.quantize_transmission);
        let mut entries = BTreeMap::new();
        let mut loss = 0.0;
        for key in self.model.keys() {
            let (m, n) = self.model.dims(key);
            let ffa = self.method == Method::FfaLora;
            let adapter = if ffa {
                LoraAdapter::new(Matrix::zeros(m, rank), self.a_init[&key].select_rows(0..rank))?
            } else {
                init_local_adapter(m, n, rank, init_seed(self.cfg.seed, k, round, key))?
            };
            let opts = LocalOptions {
                epochs: self.cfg.local_epochs,
                learning_rate: self.cfg.learning_rate,
                batch: self.cfg.batch,
                freeze_a: ffa,
                seed: seed::derive(
                    self.cfg.seed,
                    &[TAG_BATCH, k as u64, round as u64, key.0 as u64, key.1 as u64],
                ),
            };
            let trained = local_update(&self.task.get(key).clients[k], &base[&key], adapter, &opts)?;
            loss += trained.final_loss;
            let uploaded = match self.method {
                Method::FedIt => {
                    let padded = zero_pad(&trained.adapter, self.max_rank)?;
                    let mut got = channel.send(Direction::Up, &[padded.b(), padded.a()])?;
                    let a = got.pop().expect("two matrices");
                    LoraAdapter::new(got.pop().expect("two matrices"), a)?
                }
                Method::FfaLora => {
                    let padded = zero_pad(&trained.adapter, self.max_rank)?;
                    let b = channel.send(Direction::Up, &[padded.b()])?.pop().expect("one matrix");
                    LoraAdapter::new(b, self.a_init[&key].clone())?
                }
                _ => {
                    let mut got = channel.send(Direction::Up, &[trained.adapter.b(), trained.adapter.a()])?;
                    let a = got.pop().expect("two matrices");
                    LoraAdapter::new(got.pop().expect("two matrices"), a)?
                }
            };
            entries.insert(key, uploaded);
        }
        Ok(Upload {
            set: AdapterLayerSet::new(self.model.clone(), entries)?,
            train_loss: loss / self.model.matrix_count() as f64,
            bytes: channel.uploaded_bytes,
        })
    }

    /// Broadcast to client `k` and merge into its base; returns bytes received.
    fn receive(&self, k: usize, agg: &ModelAggregate, base: &mut Weights) -> Result<u64> {
        let id = self.clients[k].client_id;
        let mut channel = Channel::new(self.format, self.cfg.quantize_transmission);
        for (key, out) in &agg.outputs {
            let (b, a) = match out {
                AggregateOutput::Averaged(avg) if self.method == Method::FfaLora => {
                    let b = channel.send(Direction::Down, &[avg.b()])?.pop().expect("one matrix");
                    (b, self.a_init[key].clone())
                }
                AggregateOutput::Stacked(s) => {
                    let mut got = channel.send(Direction::Down, &[&s.b_stack, &s.a_stack])?;
                    let a = got.pop().expect("two matrices");
                    (got.pop().expect("two matrices"), a)
                }
                other => {
                    let adapter = other.for_client(id);
                    let mut got = channel.send(Direction::Down, &[adapter.b(), adapter.a()])?;
                    let a = got.pop().expect("two matrices");
                    (got.pop().expect("two matrices"), a)
                }
            };
            merge_into(base.get_mut(key).expect("every key has a base"), &b, &a)?;
        }
        Ok(channel.downloaded_bytes)
    }

    fn holdout_loss(&self, weights: &[Weights]) -> Result<f64> {
        let mut total = 0.0;
        for w in weights {
            for key in self.model.keys() {
                total += self.task.get(key).holdout.loss(&w[&key])?;
            }
        }
        Ok(total / (weights.len() * self.model.matrix_count()) as f64)
    }

    fn initial_weights(&self) -> Vec<Weights> {
        let w0: Weights = self.task.matrices.iter().map(|(k, t)| (*k, t.w0.clone())).collect();
        vec![w0; self.clients.len()]
    }
}

/// `(‖published − oracle‖_F, ‖oracle‖_F)` summed in quadrature over matrices.
fn reconstruction(agg: &ModelAggregate, uploads: &[Upload], clients: &[ClientConfig]) -> Result<(f64, f64)> {
    let weights = cohort_weights(clients)?;
    let mut err = 0.0;
    let mut norm = 0.0;
    for (key, out) in &agg.outputs {
        let adapters: Vec<&LoraAdapter> = uploads.iter().map(|u| u.set.get(*key)).collect();
        let oracle = oracle_delta_w(&adapters, &weights)?;
        let published = out.representative().product()?;
        err += published.sub(&oracle)?.frobenius_norm().powi(2);
        norm += oracle.frobenius_norm().powi(2);
    }
    Ok((err.sqrt(), norm.sqrt()))
}

fn layer_ranks(agg: &ModelAggregate) -> Vec<usize> {
    agg.outputs
        .values()
        .map(|o| o.global_rank().unwrap_or_else(|| o.representative().rank()))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_observed(cfg, |_, _| {})
}

/// As [`run_experiment`], calling `observe(round, merged)` after every merge.
pub fn run_experiment_observed(
    cfg: &ExperimentConfig,
    mut observe: impl FnMut(usize, &[Weights]),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let task = SyntheticTask::generate(cfg)?;
    let ctx = Context::new(cfg, &task, cfg.method)?;
    let policy = cfg.policy();
    let mut weights = ctx.initial_weights();
    let mut logs = Vec::with_capacity(cfg.rounds);
    let mut last = None;

    for round in 1..=cfg.rounds {
        let result = (|| -> Result<(RoundLog, ModelAggregate)> {
            let uploads = ctx.map_clients(|k| ctx.train(k, round, &weights[k]))?;
            let sets: Vec<AdapterLayerSet> = uploads.iter().map(|u| u.set.clone()).collect();
            let agg = aggregate_model_with(ctx.method, &sets, &ctx.clients, &policy, cfg.parallel)?;

            let received: Vec<(Weights, u64)> = ctx.map_clients(|k| {
                let mut w = weights[k].clone();
                let bytes = ctx.receive(k, &agg, &mut w)?;
                Ok((w, bytes))
            })?;
            let mut download_bytes = 0;
            for (k, (w, bytes)) in received.into_iter().enumerate() {
                weights[k] = w;
                download_bytes += bytes;
            }

            let (recon_error, oracle_norm) = reconstruction(&agg, &uploads, &ctx.clients)?;
            let ranks = layer_ranks(&agg);
            let per_layer_p = (ctx.method == Method::Florist).then(|| ranks.clone());
            let scenario = CostScenario::new(ctx.model.clone(), ctx.clients.clone(), ctx.method, per_layer_p)?;
            let log = RoundLog {
                round,
                method: ctx.method,
                layer_ranks: ranks,
                recon_error,
                recon_error_rel: if oracle_norm > 0.0 {
                    recon_error / oracle_norm
                } else {
                    0.0
                },
                holdout_loss: ctx.holdout_loss(&weights)?,
                train_loss: uploads.iter().map(|u| u.train_loss).sum::<f64>() / uploads.len() as f64,
                measured_upload_bytes: uploads.iter().map(|u| u.bytes).sum(),
                measured_download_bytes: download_bytes,
                cost: cost_report(&scenario)?,
                round_seed: seed::derive(cfg.seed, &[TAG_INIT, round as u64]),
            };
            Ok((log, agg))
        })();
        let (log, agg) = result.map_err(|e| e.in_round(round))?;
        log::info!(
            "round {round}: holdout loss {:.6e}, total rank {}",
            log.holdout_loss,
            log.layer_ranks.iter().sum::<usize>()
        );
        observe(round, &weights);
        logs.push(log);
        last = Some(agg);
    }
    Ok(ExperimentOutcome {
        logs,
        final_aggregate: last.expect("at least one round"),
        weights,
    })
}

/// Result of [`threshold_sweep`]; `aggregates[i]` belongs to `rows[i]`.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<ModelAggregate>,
}

/// Trains every client once from `W0`, then aggregates with FLoRIST at each
/// threshold in `taus` over the same cached uploads.
pub fn threshold_sweep(cfg: &ExperimentConfig, taus: &[f64]) -> Result<SweepOutcome> {
    cfg.validate()?;
    let policies = taus
        .iter()
        .map(|&t| ThresholdPolicy::new(t, cfg.tau_variant))
        .collect::<Result<Vec<_>>>()?;
    let task = SyntheticTask::generate(cfg)?;
    let ctx = Context::new(cfg, &task, Method::Florist)?;
    let base = ctx.initial_weights();
    let uploads = ctx.map_clients(|k| ctx.train(k, 1, &base[k]))?;
    let sets: Vec<AdapterLayerSet> = uploads.iter().map(|u| u.set.clone()).collect();

    let weights = cohort_weights(&ctx.clients)?;
    let mut oracles = BTreeMap::new();
    for key in ctx.model.keys() {
        let adapters: Vec<&LoraAdapter> = uploads.iter().map(|u| u.set.get(key)).collect();
        oracles.insert(key, oracle_delta_w(&adapters, &weights)?);
    }
    let total_energy: f64 = oracles.values().map(|o| o.frobenius_norm().powi(2)).sum();

    let mut rows = Vec::with_capacity(taus.len());
    let mut aggregates = Vec::with_capacity(taus.len());
    for policy in policies {
        let agg = aggregate_model_with(Method::Florist, &sets, &ctx.clients, &policy, cfg.parallel)?;
        let mut squared_error = 0.0;
        let mut discarded_energy = 0.0;
        let mut loss = 0.0;
        let mut ranks = Vec::new();
        for (key, out) in &agg.outputs {
            let AggregateOutput::Global(g) = out else {
                unreachable!("FLoRIST yields global adapters")
            };
            let product = g.product()?;
            squared_error += product.sub(&oracles[key])?.frobenius_norm().powi(2);
            discarded_energy += g.spectrum[g.rank()..].iter().map(|s| s * s).sum::<f64>();
            let mut w = task.get(*key).w0.clone();
            w.axpy(1.0, &product)?;
            loss += task.get(*key).holdout.loss(&w)?;
            ranks.push(g.rank());
        }
        let total_rank: usize = ranks.iter().sum();
        let scenario = CostScenario::new(
            ctx.model.clone(),
            ctx.clients.clone(),
            Method::Florist,
            Some(ranks.clone()),
        )?;
        rows.push(SweepRow {
            tau: policy.tau,
            total_rank,
            recon_error: squared_error.sqrt(),
            recon_error_rel: if total_energy > 0.0 {
                (squared_error / total_energy).sqrt()
            } else {
                0.0
            },
            holdout_loss: loss / ctx.model.matrix_count() as f64,
            download_params: comm_cost(&scenario)?.1,
            efficiency: (total_rank > 0).then(|| 1.0 / total_rank as f64),
            squared_error,
            discarded_energy,
            total_energy,
            layer_ranks: ranks,
        });
        aggregates.push(agg);
    }
    Ok(SweepOutcome { rows, aggregates })
}

/// Per-matrix `p` and retained energy, plus the full spectra of `P`.
pub fn layer_rank_report(agg: &ModelAggregate, model: &ModelConfig) -> Result<RankReport> {
    let mut rows = Vec::new();
    let mut spectra = Vec::new();
    for (key, out) in &agg.outputs {
        let AggregateOutput::Global(g) = out else {
            return Err(Error::InvalidArgument(format!(
                "rank report needs a FLoRIST aggregate, got {}",
                agg.method
            )));
        };
        let projection = model.projections()[key.1].clone();
        rows.push(RankRow {
            layer: key.0,
            projection: projection.clone(),
            p: g.rank(),
            retained_energy: g.energy_retained,
            tau: g.tau,
        });
        for (index, &singular_value) in g.spectrum.iter().enumerate() {
            spectra.push(SpectrumRow {
                layer: key.0,
                projection: projection.clone(),
                index,
                singular_value,
            });
        }
    }
    Ok(RankReport { rows, spectra })
}

pub const COHORT_HETEROGENEOUS: &str = "heterogeneous";
pub const COHORT_HOMOGENEOUS: &str = "homogeneous";

/// Runs every adapter method on the configured cohort and on a homogeneous
/// cohort with the same dataset sizes; one row per (cohort, method).
pub fn compare_methods(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    let homogeneous: Vec<ClientSpec> = cfg
        .clients
        .iter()
        .map(|c| ClientSpec {
            rank: cfg.compare.homogeneous_rank,
            dataset_size: c.dataset_size,
        })
        .collect();
    let cohorts = [
        (COHORT_HETEROGENEOUS, cfg.clients.clone()),
        (COHORT_HOMOGENEOUS, homogeneous),
    ];
    let mut rows = Vec::new();
    for (name, clients) in cohorts {
        for method in Method::LORA {
            let run_cfg = ExperimentConfig {
                method,
                clients: clients.clone(),
                ..cfg.clone()
            };
            let outcome = run_experiment(&run_cfg)?;
            let last = outcome.logs.last().expect("at least one round");
            rows.push(CompareRow {
                cohort: name.to_string(),
                method,
                holdout_loss: last.holdout_loss,
                total_rank: last.cost.total_rank.unwrap_or(0.0),
                download_params: last.cost.download_params,
                server_flops: last.cost.server_flops,
            });
        }
    }
    Ok(rows)
}

/// Adapter set publishing the final aggregate (widest truncation for FlexLoRA).
pub fn published_adapters(agg: &ModelAggregate, model: &ModelConfig) -> Result<AdapterLayerSet> {
    AdapterLayerSet::new(
        model.clone(),
        agg.outputs.iter().map(|(k, o)| (*k, o.representative())).collect(),
    )
}
