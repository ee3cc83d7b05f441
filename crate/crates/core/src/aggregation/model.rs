//! Whole-model aggregation: one independent per-matrix call per
//! `(layer, projection)`, with clients in ascending `client_id` order.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    fedit_aggregate, ffa_aggregate, flexlora_aggregate, florist_aggregate, FlexLoraOutput, Method, ThresholdPolicy,
};
use crate::adapters::{
    cohort_weights, stack_with_ids, zero_pad, AdapterLayerSet, ClientConfig, GlobalAdapter, LoraAdapter, MatrixKey,
    StackedPair,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Result of aggregating one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum AggregateOutput {
    /// FedIT / FFA-LoRA: a single averaged adapter.
    Averaged(LoraAdapter),
    /// FLoRA: the stacked pair.
    Stacked(StackedPair),
    /// FlexLoRA: per-client truncations.
    PerClient(FlexLoraOutput),
    /// FLoRIST: thresholded global adapter.
    Global(GlobalAdapter),
}

impl AggregateOutput {
    /// The single adapter the server would publish as "the" global update.
    /// For FlexLoRA this is the widest truncation.
    pub fn representative(&self) -> LoraAdapter {
        match self {
            AggregateOutput::Averaged(a) => a.clone(),
            AggregateOutput::Stacked(s) => s.clone().into_adapter(),
            AggregateOutput::PerClient(f) => f.widest().cloned().expect("non-empty cohort"),
            AggregateOutput::Global(g) => g.to_adapter(),
        }
    }

    /// Adapter delivered to `client_id`.
    pub fn for_client(&self, client_id: usize) -> LoraAdapter {
        match self {
            AggregateOutput::PerClient(f) => f.per_client[&client_id].clone(),
            other => other.representative(),
        }
    }

    /// Global rank `p` for FLoRIST outputs.
    pub fn global_rank(&self) -> Option<usize> {
        match self {
            AggregateOutput::Global(g) => Some(g.rank()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAggregate {
    pub method: Method,
    pub outputs: BTreeMap<MatrixKey, AggregateOutput>,
}

impl ModelAggregate {
    /// FLoRIST per-matrix ranks `p`, in key order.
    pub fn layer_ranks(&self) -> Option<BTreeMap<MatrixKey, usize>> {
        self.outputs
            .iter()
            .map(|(k, o)| o.global_rank().map(|p| (*k, p)))
            .collect()
    }

    pub fn get(&self, key: MatrixKey) -> &AggregateOutput {
        &self.outputs[&key]
    }
}

pub fn aggregate_model(
    method: Method,
    sets: &[AdapterLayerSet],
    clients: &[ClientConfig],
    policy: &ThresholdPolicy,
) -> Result<ModelAggregate> {
    aggregate_model_with(method, sets, clients, policy, false)
}

/// As [`aggregate_model`]; `parallel` spreads matrices over the rayon pool.
/// Output is identical either way.
pub fn aggregate_model_with(
    method: Method,
    sets: &[AdapterLayerSet],
    clients: &[ClientConfig],
    policy: &ThresholdPolicy,
    parallel: bool,
) -> Result<ModelAggregate> {
    if method == Method::FullFt {
        return Err(Error::InvalidArgument(
            "full fine-tuning has no adapter aggregation".into(),
        ));
    }
    if sets.len() != clients.len() {
        return Err(Error::InvalidArgument(format!(
            "{} adapter sets for {} clients",
            sets.len(),
            clients.len()
        )));
    }
    let config = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty cohort".into()))?
        .config();
    if sets.iter().any(|s| s.config() != config) {
        return Err(Error::InvalidArgument(
            "client adapter sets disagree on the model config".into(),
        ));
    }

    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].client_id);
    if order
        .windows(2)
        .any(|w| clients[w[0]].client_id == clients[w[1]].client_id)
    {
        return Err(Error::InvalidArgument("duplicate client ids".into()));
    }
    let ordered: Vec<ClientConfig> = order.iter().map(|&i| clients[i]).collect();
    let ordered_sets: Vec<&AdapterLayerSet> = order.iter().map(|&i| &sets[i]).collect();
    let weights = cohort_weights(&ordered)?;

    let keys: Vec<MatrixKey> = config.keys().collect();
    let run = |key: &MatrixKey| -> Result<(MatrixKey, AggregateOutput)> {
        let adapters: Vec<&LoraAdapter> = ordered_sets.iter().map(|s| s.get(*key)).collect();
        aggregate_matrix(method, &adapters, &ordered, &weights, policy).map(|o| (*key, o))
    };
    let outputs: Vec<(MatrixKey, AggregateOutput)> = if parallel {
        keys.par_iter().map(run).collect::<Result<_>>()?
    } else {
        keys.iter().map(run).collect::<Result<_>>()?
    };
    Ok(ModelAggregate {
        method,
        outputs: outputs.into_iter().collect(),
    })
}

fn aggregate_matrix(
    method: Method,
    adapters: &[&LoraAdapter],
    clients: &[ClientConfig],
    weights: &[f64],
    policy: &ThresholdPolicy,
) -> Result<AggregateOutput> {
    let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let max_rank = adapters.iter().map(|a| a.rank()).max().unwrap_or(0);
    Ok(match method {
        Method::FedIt => {
            let padded = pad_all(adapters, max_rank)?;
            AggregateOutput::Averaged(fedit_aggregate(&padded, weights)?)
        }
        Method::FfaLora => {
            let a_init = adapters
                .iter()
                .find(|a| a.rank() == max_rank)
                .expect("non-empty cohort")
                .a();
            for a in adapters {
                if a.a().as_slice() != &a_init.as_slice()[..a.a().len()] {
                    return Err(Error::InvalidArgument(
                        "FFA-LoRA clients must share the frozen A matrix".into(),
                    ));
                }
            }
            let padded = pad_all(adapters, max_rank)?;
            let bs: Vec<&Matrix> = padded.iter().map(LoraAdapter::b).collect();
            AggregateOutput::Averaged(ffa_aggregate(&bs, weights, a_init)?)
        }
        Method::Flora => AggregateOutput::Stacked(stack_with_ids(adapters, weights, &ids)?),
        Method::FlexLora => {
            let ranks: Vec<usize> = clients.iter().map(|c| c.rank).collect();
            let out = flexlora_aggregate(adapters, weights, &ranks)?;
            let per_client = out.per_client.into_values().zip(&ids).map(|(a, &id)| (id, a)).collect();
            AggregateOutput::PerClient(FlexLoraOutput {
                per_client,
                spectrum: out.spectrum,
            })
        }
        Method::Florist => AggregateOutput::Global(florist_aggregate(adapters, weights, policy)?),
        Method::FullFt => unreachable!("rejected above"),
    })
}

fn pad_all(adapters: &[&LoraAdapter], rank: usize) -> Result<Vec<LoraAdapter>> {
    if adapters.iter().any(|a| a.rank() != rank) {
        log::warn!("heterogeneous ranks; zero-padding every adapter to rank {rank}");
    }
    adapters.iter().map(|a| zero_pad(a, rank)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ModelConfig;
    use crate::aggregation::oracle_delta_w;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(cfg: &ModelConfig, rank: usize, zero_layer: Option<usize>, rng: &mut ChaCha8Rng) -> AdapterLayerSet {
        AdapterLayerSet::from_fn(cfg.clone(), |(l, _), (m, n)| {
            if Some(l) == zero_layer {
                return LoraAdapter::zeros(m, n, rank);
            }
            let b = Matrix::from_fn(m, rank, |_, _| rng.random_range(-1.0..1.0));
            let a = Matrix::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0));
            LoraAdapter::new(b, a).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn single_matrix_model_matches_direct_call() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::uniform(1, &[("q_proj", 10, 8)], 2).unwrap();
        let clients = [ClientConfig::new(0, 2, 30), ClientConfig::new(1, 3, 10)];
        let sets = [random_set(&cfg, 2, None, &mut rng), random_set(&cfg, 3, None, &mut rng)];
        let policy = ThresholdPolicy::fixed(0.9).unwrap();
        let agg = aggregate_model(Method::Florist, &sets, &clients, &policy).unwrap();
        let direct = florist_aggregate(&[sets[0].get((0, 0)), sets[1].get((0, 0))], &[0.75, 0.25], &policy).unwrap();
        assert_eq!(agg.get((0, 0)), &AggregateOutput::Global(direct));
    }

    #[test]
    fn zero_layer_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::square(2, 6).unwrap();
        let clients = [ClientConfig::new(0, 2, 5), ClientConfig::new(1, 2, 5)];
        let sets = [
            random_set(&cfg, 2, Some(1), &mut rng),
            random_set(&cfg, 2, Some(1), &mut rng),
        ];
        let agg = aggregate_model(Method::Florist, &sets, &clients, &ThresholdPolicy::fixed(1.0).unwrap()).unwrap();
        let ranks = agg.layer_ranks().unwrap();
        assert_eq!(ranks[&(1, 0)], 0);
        assert_eq!(ranks[&(1, 1)], 0);
        assert_eq!(ranks[&(0, 0)], 4);
    }

    #[test]
    fn client_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::square(1, 7).unwrap();
        let clients = [
            ClientConfig::new(4, 1, 8),
            ClientConfig::new(2, 3, 3),
            ClientConfig::new(9, 2, 5),
        ];
        let sets: Vec<_> = clients
            .iter()
            .map(|c| random_set(&cfg, c.rank, None, &mut rng))
            .collect();
        let policy = ThresholdPolicy::fixed(0.95).unwrap();
        for method in Method::LORA {
            if method == Method::FfaLora {
                continue;
            }
            let fwd = aggregate_model(method, &sets, &clients, &policy).unwrap();
            let rev_sets: Vec<_> = sets.iter().rev().cloned().collect();
            let rev_clients: Vec<_> = clients.iter().rev().copied().collect();
            let rev = aggregate_model(method, &rev_sets, &rev_clients, &policy).unwrap();
            assert_eq!(fwd, rev, "{method}");
        }
    }

    #[test]
    fn parallel_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig::square(3, 9).unwrap();
        let clients: Vec<_> = (0..4).map(|k| ClientConfig::new(k, 1 + k, 10 + k)).collect();
        let sets: Vec<_> = clients
            .iter()
            .map(|c| random_set(&cfg, c.rank, None, &mut rng))
            .collect();
        let policy = ThresholdPolicy::fixed(0.9).unwrap();
        let a = aggregate_model_with(Method::Florist, &sets, &clients, &policy, false).unwrap();
        let b = aggregate_model_with(Method::Florist, &sets, &clients, &policy, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fedit_pads_heterogeneous_cohorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig::square(1, 5).unwrap();
        let clients = [ClientConfig::new(0, 1, 1), ClientConfig::new(1, 3, 1)];
        let sets = [random_set(&cfg, 1, None, &mut rng), random_set(&cfg, 3, None, &mut rng)];
        let agg = aggregate_model(Method::FedIt, &sets, &clients, &ThresholdPolicy::fixed(1.0).unwrap()).unwrap();
        assert_eq!(agg.get((0, 1)).representative().rank(), 3);
    }

    #[test]
    fn ffa_requires_shared_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig::square(1, 5).unwrap();
        let clients = [ClientConfig::new(0, 2, 1), ClientConfig::new(1, 2, 1)];
        let sets = [random_set(&cfg, 2, None, &mut rng), random_set(&cfg, 2, None, &mut rng)];
        let policy = ThresholdPolicy::fixed(1.0).unwrap();
        assert!(aggregate_model(Method::FfaLora, &sets, &clients, &policy).is_err());

        let shared = sets[0].clone();
        let other = AdapterLayerSet::from_fn(cfg.clone(), |k, (m, _)| {
            let b = Matrix::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
            LoraAdapter::new(b, shared.get(k).a().clone()).unwrap()
        })
        .unwrap();
        let sets = [shared, other];
        let agg = aggregate_model(Method::FfaLora, &sets, &clients, &policy).unwrap();
        let oracle = oracle_delta_w(&[sets[0].get((0, 0)), sets[1].get((0, 0))], &[0.5, 0.5]).unwrap();
        let got = agg.get((0, 0)).representative().product().unwrap();
        assert!(got.sub(&oracle).unwrap().frobenius_norm() <= 1e-12);
    }

    #[test]
    fn rejects_mismatched_cohort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig::square(1, 4).unwrap();
        let sets = [random_set(&cfg, 2, None, &mut rng)];
        let clients = [ClientConfig::new(0, 2, 1), ClientConfig::new(1, 2, 1)];
        let policy = ThresholdPolicy::fixed(1.0).unwrap();
        assert!(aggregate_model(Method::Flora, &sets, &clients, &policy).is_err());
        assert!(aggregate_model(Method::FullFt, &sets, &clients[..1], &policy).is_err());
        let other = ModelConfig::square(1, 5).unwrap();
        let sets2 = [sets[0].clone(), random_set(&other, 2, None, &mut rng)];
        assert!(aggregate_model(Method::Flora, &sets2, &clients, &policy).is_err());
    }
}
