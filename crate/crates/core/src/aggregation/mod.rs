//! Server-side aggregation strategies.
//!
//! Every strategy consumes per-client adapters for one weight matrix plus
//! FedAvg weights `w_k = n_k / N`. [`oracle_delta_w`] forms the dense
//! aggregate `ΔW = Σ w_k B_k A_k` directly and is the reference every other
//! strategy is measured against.

mod energy;
mod model;

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{check_common_shape, check_weights, stack, GlobalAdapter, LoraAdapter, StackedPair};
use crate::error::{Error, Result};
use crate::tensor::{thin_svd, track, Matrix};

pub use energy::{energy_rank, retained_energy};
pub use model::{aggregate_model, aggregate_model_with, AggregateOutput, ModelAggregate};

/// Fine-tuning method. `FullFt` only exists for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullFt,
    #[serde(rename = "fedit")]
    FedIt,
    FfaLora,
    Flora,
    #[serde(rename = "flexlora")]
    FlexLora,
    Florist,
}

impl Method {
    pub const LORA: [Method; 5] = [
        Method::FedIt,
        Method::FfaLora,
        Method::Flora,
        Method::FlexLora,
        Method::Florist,
    ];

    pub const ALL: [Method; 6] = [
        Method::FullFt,
        Method::FedIt,
        Method::FfaLora,
        Method::Flora,
        Method::FlexLora,
        Method::Florist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFt => "full-ft",
            Method::FedIt => "fedit",
            Method::FfaLora => "ffa-lora",
            Method::Flora => "flora",
            Method::FlexLora => "flexlora",
            Method::Florist => "florist",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Which sweep-selected threshold a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdVariant {
    /// Best task quality in a sweep.
    Optimal,
    /// Lowest threshold still beating the baselines.
    Efficient,
    #[default]
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub tau: f64,
    #[serde(default)]
    pub variant: ThresholdVariant,
}

impl ThresholdPolicy {
    pub fn new(tau: f64, variant: ThresholdVariant) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidThreshold(tau));
        }
        Ok(Self { tau, variant })
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, ThresholdVariant::Fixed)
    }
}

/// FlexLoRA result: one truncation of the global SVD per client.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexLoraOutput {
    pub per_client: BTreeMap<usize, LoraAdapter>,
    /// Singular values of the dense aggregate.
    pub spectrum: Vec<f64>,
}

impl FlexLoraOutput {
    /// The highest-rank truncation (first client on ties).
    pub fn widest(&self) -> Option<&LoraAdapter> {
        self.per_client
            .values()
            .fold(None, |best: Option<&LoraAdapter>, a| match best {
                Some(b) if b.rank() >= a.rank() => Some(b),
                _ => Some(a),
            })
    }
}

/// `Σ w_k M_k`, charging a multiply and an add per entry and term.
fn weighted_sum<'a>(mats: impl ExactSizeIterator<Item = &'a Matrix>, weights: &[f64]) -> Result<Matrix> {
    let mut out: Option<Matrix> = None;
    for (m, &w) in mats.zip(weights) {
        let acc = out.get_or_insert_with(|| Matrix::zeros(m.rows(), m.cols()));
        acc.axpy(w, m)?;
        track::charge(2 * m.len() as u64);
    }
    out.ok_or_else(|| Error::InvalidArgument("no matrices to average".into()))
}

/// FedIT: averages `B` and `A` independently. Ranks must already agree.
pub fn fedit_aggregate<A: Borrow<LoraAdapter>>(adapters: &[A], weights: &[f64]) -> Result<LoraAdapter> {
    check_common_shape(adapters)?;
    check_weights(weights, adapters.len())?;
    let rank = adapters[0].borrow().rank();
    if let Some(found) = adapters.iter().map(|a| a.borrow().rank()).find(|&r| r != rank) {
        return Err(Error::RankMismatch { expected: rank, found });
    }
    let b = weighted_sum(adapters.iter().map(|a| a.borrow().b()), weights)?;
    let a = weighted_sum(adapters.iter().map(|a| a.borrow().a()), weights)?;
    LoraAdapter::new(b, a)
}

/// FFA-LoRA: averages the trainable `B_k` against a shared frozen `A`.
pub fn ffa_aggregate<M: Borrow<Matrix>>(b_list: &[M], weights: &[f64], a_init: &Matrix) -> Result<LoraAdapter> {
    let first = b_list
        .first()
        .ok_or_else(|| Error::InvalidArgument("no adapters to aggregate".into()))?
        .borrow()
        .shape();
    for b in b_list {
        let shape = b.borrow().shape();
        if shape != first {
            return Err(Error::ShapeMismatch {
                op: "ffa_aggregate",
                left: first,
                right: shape,
            });
        }
    }
    if a_init.rows() != first.1 {
        return Err(Error::ShapeMismatch {
            op: "ffa_aggregate",
            left: first,
            right: a_init.shape(),
        });
    }
    check_weights(weights, b_list.len())?;
    let b = weighted_sum(b_list.iter().map(Borrow::borrow), weights)?;
    LoraAdapter::new(b, a_init.clone())
}

/// FLoRA: the stacked pair itself is the global adapter.
pub fn flora_aggregate<A: Borrow<LoraAdapter>>(adapters: &[A], weights: &[f64]) -> Result<StackedPair> {
    stack(adapters, weights)
}

/// Dense reference aggregate `ΔW = Σ w_k B_k A_k`.
pub fn oracle_delta_w<A: Borrow<LoraAdapter>>(adapters: &[A], weights: &[f64]) -> Result<Matrix> {
    let (m, n) = check_common_shape(adapters)?;
    check_weights(weights, adapters.len())?;
    let mut out = Matrix::zeros(m, n);
    for (a, &w) in adapters.iter().zip(weights) {
        out.axpy(w, &a.borrow().product()?)?;
    }
    Ok(out)
}

/// FlexLoRA: SVD of the dense aggregate, truncated to each client's rank.
/// Singular values are folded into `B`.
pub fn flexlora_aggregate<A: Borrow<LoraAdapter>>(
    adapters: &[A],
    weights: &[f64],
    client_ranks: &[usize],
) -> Result<FlexLoraOutput> {
    if client_ranks.len() != adapters.len() {
        return Err(Error::InvalidArgument(format!(
            "{} client ranks for {} adapters",
            client_ranks.len(),
            adapters.len()
        )));
    }
    let stacked = stack(adapters, weights)?;
    let delta_w = stacked.product()?;
    drop(stacked);
    let svd = thin_svd(&delta_w)?;
    drop(delta_w);
    let available = svd.s.len();
    let mut per_client = BTreeMap::new();
    for (k, &rank) in client_ranks.iter().enumerate() {
        let rk = rank.min(available);
        let b = svd.u.select_cols(0..rk).scale_cols(&svd.s[..rk])?;
        let a = svd.vt.select_rows(0..rk);
        per_client.insert(k, LoraAdapter::new(b, a)?);
    }
    Ok(FlexLoraOutput {
        per_client,
        spectrum: svd.s,
    })
}

/// FLoRIST: stacked-SVD aggregation with energy thresholding.
///
/// With `B_stack = U_B S_B V_Bᵀ` and `A_stack = U_A S_A V_Aᵀ`, the aggregate
/// is `U_B · P · V_Aᵀ` where `P = S_B (V_Bᵀ U_A) S_A` is at most `r × r`.
/// The outer factors have orthonormal columns/rows, so the SVD of `P` gives
/// the singular values of `ΔW` and its singular vectors after one rotation.
/// No `m × n` matrix is ever formed.
pub fn florist_aggregate<A: Borrow<LoraAdapter>>(
    adapters: &[A],
    weights: &[f64],
    policy: &ThresholdPolicy,
) -> Result<GlobalAdapter> {
    ThresholdPolicy::new(policy.tau, policy.variant)?;
    #[cfg(debug_assertions)]
    let scope = crate::tensor::track::AllocScope::new();
    let stacked = stack(adapters, weights)?;
    let (m, n) = (stacked.b_stack.rows(), stacked.a_stack.cols());
    let r = stacked.rank();

    let svd_b = thin_svd(&stacked.b_stack)?;
    let svd_a = thin_svd(&stacked.a_stack)?;
    drop(stacked);

    let q = svd_b.vt.matmul(&svd_a.u)?;
    let p_core = q.scale_rows(&svd_b.s)?.scale_cols(&svd_a.s)?;
    drop(q);
    let svd_p = thin_svd(&p_core)?;
    drop(p_core);

    let p = energy_rank(&svd_p.s, policy.tau)?;
    let energy = retained_energy(&svd_p.s, p);

    let (b_g, a_g) = if p == 0 {
        (Matrix::zeros(m, 0), Matrix::zeros(0, n))
    } else {
        let b_g = svd_b.u.matmul(&svd_p.u.select_cols(0..p))?.scale_cols(&svd_p.s[..p])?;
        let a_g = svd_p.vt.select_rows(0..p).matmul(&svd_a.vt)?;
        (b_g, a_g)
    };
    // Every intermediate is bounded by the stacked factors.
    #[cfg(debug_assertions)]
    debug_assert!(
        scope.stats().largest <= m.max(n) * r.max(1),
        "FLoRIST allocated a {}-element matrix for a {m}x{n} target at stacked rank {r}",
        scope.stats().largest
    );
    #[cfg(not(debug_assertions))]
    let _ = r;
    Ok(GlobalAdapter {
        b_g,
        a_g,
        energy_retained: energy,
        tau: policy.tau,
        spectrum: svd_p.s,
    })
}
