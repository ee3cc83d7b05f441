mod common;

use common::*;
use fedlora_core::adapters::AdapterLayerSet;
use fedlora_core::costmodel::{flops_estimate, memory_cost};
use fedlora_core::tensor::track::{AllocScope, FlopScope};
use fedlora_core::{
    aggregate_model, energy_rank, flexlora_aggregate, florist_aggregate, oracle_delta_w, ClientConfig, CostScenario,
    Method, ModelConfig, ThresholdPolicy,
};
use proptest::prelude::*;

fn cohort_strategy() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
    (
        1usize..20,
        1usize..20,
        prop::collection::vec(1usize..7, 1..5),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn florist_full_threshold_is_exact((m, n, ranks, seed) in cohort_strategy()) {
        let (adapters, weights) = random_cohort(m, n, &ranks, &mut rng(seed));
        let oracle = oracle_delta_w(&adapters, &weights).unwrap();
        let g = florist_aggregate(&adapters, &weights, &ThresholdPolicy::fixed(1.0).unwrap()).unwrap();
        let err = g.product().unwrap().sub(&oracle).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * (1.0 + oracle.frobenius_norm()));
        let s_oracle = oracle_singular_values(&oracle);
        prop_assert!(max_abs_diff(&g.spectrum, &s_oracle) <= 1e-8 * s_oracle[0].max(1e-300));
    }

    #[test]
    fn rank_is_bounded_and_monotone((m, n, ranks, seed) in cohort_strategy(), t1 in 0.05f64..=1.0, t2 in 0.05f64..=1.0) {
        let (adapters, weights) = random_cohort(m, n, &ranks, &mut rng(seed));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p_lo = florist_aggregate(&adapters, &weights, &ThresholdPolicy::fixed(lo).unwrap()).unwrap().rank();
        let p_hi = florist_aggregate(&adapters, &weights, &ThresholdPolicy::fixed(hi).unwrap()).unwrap().rank();
        let bound = m.min(n).min(ranks.iter().sum());
        prop_assert!(p_lo <= p_hi);
        prop_assert!(p_hi <= bound);
    }

    #[test]
    fn truncation_error_is_discarded_energy((m, n, ranks, seed) in cohort_strategy(), tau in 0.05f64..=1.0) {
        let (adapters, weights) = random_cohort(m, n, &ranks, &mut rng(seed));
        let oracle = oracle_delta_w(&adapters, &weights).unwrap();
        let g = florist_aggregate(&adapters, &weights, &ThresholdPolicy::fixed(tau).unwrap()).unwrap();
        let sq = g.product().unwrap().sub(&oracle).unwrap().frobenius_norm().powi(2);
        let discarded: f64 = g.spectrum[g.rank()..].iter().map(|s| s * s).sum();
        let total = oracle.frobenius_norm().powi(2);
        prop_assert!((sq - discarded).abs() <= 1e-8 * total.max(1e-300));
        prop_assert_eq!(g.rank(), energy_rank(&g.spectrum, tau).unwrap());
    }

    #[test]
    fn flexlora_truncations_are_optimal((m, n, ranks, seed) in cohort_strategy()) {
        let (adapters, weights) = random_cohort(m, n, &ranks, &mut rng(seed));
        let oracle = oracle_delta_w(&adapters, &weights).unwrap();
        let s = oracle_singular_values(&oracle);
        let out = flexlora_aggregate(&adapters, &weights, &ranks).unwrap();
        let total = oracle.frobenius_norm().powi(2);
        for (k, &r) in ranks.iter().enumerate() {
            let approx = out.per_client[&k].product().unwrap();
            let sq = approx.sub(&oracle).unwrap().frobenius_norm().powi(2);
            let tail: f64 = s[r.min(s.len())..].iter().map(|x| x * x).sum();
            prop_assert!((sq - tail).abs() <= 1e-8 * total);
        }
    }
}

fn layer_sets(model: &ModelConfig, ranks: &[usize], seed: u64) -> Vec<AdapterLayerSet> {
    let mut r = rng(seed);
    ranks
        .iter()
        .map(|&rank| {
            AdapterLayerSet::from_fn(model.clone(), |_, (m, n)| {
                fedlora_core::LoraAdapter::new(random(m, rank, &mut r), random(rank, n, &mut r)).unwrap()
            })
            .unwrap()
        })
        .collect()
}

/// FFA-LoRA cohort: every client's `A` is a row-prefix of one shared matrix.
fn ffa_sets(model: &ModelConfig, ranks: &[usize], seed: u64) -> Vec<AdapterLayerSet> {
    let mut r = rng(seed);
    let rmax = *ranks.iter().max().unwrap();
    let shared: std::collections::BTreeMap<_, _> = model
        .keys()
        .map(|k| (k, random(rmax, model.dims(k).1, &mut r)))
        .collect();
    ranks
        .iter()
        .map(|&rank| {
            AdapterLayerSet::from_fn(model.clone(), |key, (m, _)| {
                fedlora_core::LoraAdapter::new(random(m, rank, &mut r), shared[&key].select_rows(0..rank)).unwrap()
            })
            .unwrap()
        })
        .collect()
}

fn clients(ranks: &[usize]) -> Vec<ClientConfig> {
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| ClientConfig::new(i, r, 10 + 3 * i))
        .collect()
}

fn florist_scenario(model: &ModelConfig, cl: &[ClientConfig], agg: &fedlora_core::ModelAggregate) -> CostScenario {
    let p: Vec<usize> = agg.layer_ranks().unwrap().into_values().collect();
    CostScenario::new(model.clone(), cl.to_vec(), Method::Florist, Some(p)).unwrap()
}

#[test]
fn instrumented_flops_match_the_estimate() {
    let model = ModelConfig::uniform(2, &[("q_proj", 24, 20), ("v_proj", 8, 20)], 2).unwrap();
    let ranks = [2, 3, 5, 9];
    let cl = clients(&ranks);
    let sets = layer_sets(&model, &ranks, 5);
    let shared_a = ffa_sets(&model, &ranks, 5);
    for method in Method::LORA {
        let sets = if method == Method::FfaLora { &shared_a } else { &sets };
        for tau in [0.5, 0.9, 1.0] {
            let policy = ThresholdPolicy::fixed(tau).unwrap();
            let scope = FlopScope::new();
            let agg = aggregate_model(method, sets, &cl, &policy).unwrap();
            let measured = scope.flops();
            let scenario = if method == Method::Florist {
                florist_scenario(&model, &cl, &agg)
            } else {
                CostScenario::new(model.clone(), cl.clone(), method, None).unwrap()
            };
            assert_eq!(measured, flops_estimate(&scenario).unwrap(), "{method} at tau {tau}");
        }
    }
}

#[test]
fn scalar_cohort_flop_tally() {
    let model = ModelConfig::uniform(1, &[("q_proj", 1, 1)], 2).unwrap();
    let cl = clients(&[1]);
    let sets = layer_sets(&model, &[1], 6);
    let scope = FlopScope::new();
    let agg = aggregate_model(Method::Florist, &sets, &cl, &ThresholdPolicy::fixed(1.0).unwrap()).unwrap();
    // Three 1x1 SVDs at 14 each, the 1x1x1 product, two scalings, and the
    // rebuild: 2 + 1 + 2.
    assert_eq!(scope.flops(), 3 * 14 + 2 + 2 + 5);
    assert_eq!(
        scope.flops(),
        flops_estimate(&florist_scenario(&model, &cl, &agg)).unwrap()
    );
}

#[test]
fn server_memory_stays_within_the_model() {
    let model = ModelConfig::uniform(1, &[("q_proj", 40, 32)], 2).unwrap();
    let ranks = [4, 4, 8, 16];
    let cl = clients(&ranks);
    let sets = layer_sets(&model, &ranks, 7);
    let uploads: usize = sets.iter().map(AdapterLayerSet::param_count).sum();
    for method in [Method::Florist, Method::FlexLora, Method::Flora] {
        let scope = AllocScope::new();
        let agg = aggregate_model(method, &sets, &cl, &ThresholdPolicy::fixed(0.95).unwrap()).unwrap();
        let peak = scope.stats().peak;
        let scenario = if method == Method::Florist {
            florist_scenario(&model, &cl, &agg)
        } else {
            CostScenario::new(model.clone(), cl.clone(), method, None).unwrap()
        };
        let (_, server) = memory_cost(&scenario).unwrap();
        assert!(
            (uploads + peak) as u64 <= server,
            "{method}: measured {} above the {} bound",
            uploads + peak,
            server
        );
    }
}
