//! LoRA adapter types, stacking and padding.

mod container;

use std::borrow::Borrow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use container::{decode_set, deserialize_set, encode_set, serialize_set, MAGIC};

/// Position of one adapted weight matrix: layer index and projection index.
pub type MatrixKey = (usize, usize);

/// Shape of the adapted model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelConfig", into = "RawModelConfig")]
pub struct ModelConfig {
    layers: usize,
    projections: Vec<String>,
    /// `dims[layer][projection] = (m, n)`: output and input dimension.
    dims: Vec<Vec<(usize, usize)>>,
    bytes_per_param: usize,
}

#[derive(Serialize, Deserialize)]
struct RawModelConfig {
    layers: usize,
    projections: Vec<String>,
    dims: Vec<Vec<(usize, usize)>>,
    bytes_per_param: usize,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = Error;

    fn try_from(raw: RawModelConfig) -> Result<Self> {
        ModelConfig::new(raw.projections, raw.dims, raw.bytes_per_param).and_then(|cfg| {
            if cfg.layers != raw.layers {
                return Err(Error::DimensionInconsistency(format!(
                    "layer count {} does not match {} dimension rows",
                    raw.layers, cfg.layers
                )));
            }
            Ok(cfg)
        })
    }
}

impl From<ModelConfig> for RawModelConfig {
    fn from(c: ModelConfig) -> Self {
        RawModelConfig {
            layers: c.layers,
            projections: c.projections,
            dims: c.dims,
            bytes_per_param: c.bytes_per_param,
        }
    }
}

pub const DEFAULT_PROJECTIONS: [&str; 2] = ["q_proj", "v_proj"];
pub const DEFAULT_BYTES_PER_PARAM: usize = 2;

impl ModelConfig {
    pub fn new(projections: Vec<String>, dims: Vec<Vec<(usize, usize)>>, bytes_per_param: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("model.layers", "need at least one layer"));
        }
        if bytes_per_param == 0 {
            return Err(Error::config("model.bytes_per_param", "must be positive"));
        }
        for (l, row) in dims.iter().enumerate() {
            if row.len() != projections.len() {
                return Err(Error::DimensionInconsistency(format!(
                    "layer {l} lists {} projection shapes, expected {}",
                    row.len(),
                    projections.len()
                )));
            }
            if let Some(p) = row.iter().position(|&(m, n)| m == 0 || n == 0) {
                return Err(Error::config(
                    format!("model.projections[{p}]"),
                    format!("layer {l} has a zero dimension"),
                ));
            }
        }
        Ok(Self {
            layers: dims.len(),
            projections,
            dims,
            bytes_per_param,
        })
    }

    /// Every layer shares the same projection shapes.
    pub fn uniform(layers: usize, projections: &[(&str, usize, usize)], bytes_per_param: usize) -> Result<Self> {
        let names = projections.iter().map(|p| p.0.to_string()).collect();
        let row: Vec<_> = projections.iter().map(|p| (p.1, p.2)).collect();
        Self::new(names, vec![row; layers], bytes_per_param)
    }

    /// `layers` layers of square `dim × dim` q/v projections, 2 bytes per parameter.
    pub fn square(layers: usize, dim: usize) -> Result<Self> {
        Self::uniform(
            layers,
            &[(DEFAULT_PROJECTIONS[0], dim, dim), (DEFAULT_PROJECTIONS[1], dim, dim)],
            DEFAULT_BYTES_PER_PARAM,
        )
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn projections(&self) -> &[String] {
        &self.projections
    }

    pub fn bytes_per_param(&self) -> usize {
        self.bytes_per_param
    }

    pub fn with_bytes_per_param(mut self, bytes: usize) -> Self {
        self.bytes_per_param = bytes.max(1);
        self
    }

    pub fn dims(&self, key: MatrixKey) -> (usize, usize) {
        self.dims[key.0][key.1]
    }

    /// All `(layer, projection)` keys in layer-major order.
    pub fn keys(&self) -> impl Iterator<Item = MatrixKey> + '_ {
        (0..self.layers).flat_map(move |l| (0..self.projections.len()).map(move |p| (l, p)))
    }

    pub fn matrix_count(&self) -> usize {
        self.layers * self.projections.len()
    }
}

/// One participating client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub client_id: usize,
    pub rank: usize,
    pub dataset_size: usize,
}

impl ClientConfig {
    pub fn new(client_id: usize, rank: usize, dataset_size: usize) -> Self {
        Self {
            client_id,
            rank,
            dataset_size,
        }
    }
}

/// FedAvg weights `n_k / N` in the order given.
pub fn cohort_weights(clients: &[ClientConfig]) -> Result<Vec<f64>> {
    if clients.is_empty() {
        return Err(Error::InvalidWeights("empty cohort".into()));
    }
    if let Some(c) = clients.iter().find(|c| c.dataset_size == 0 || c.rank == 0) {
        return Err(Error::InvalidWeights(format!(
            "client {} needs rank >= 1 and dataset_size >= 1",
            c.client_id
        )));
    }
    let total: usize = clients.iter().map(|c| c.dataset_size).sum();
    Ok(clients.iter().map(|c| c.dataset_size as f64 / total as f64).collect())
}

pub(crate) fn check_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {expected} clients",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidWeights(format!("weight {w} is not positive")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// A `(B, A)` low-rank pair: `B` is `m × r`, `A` is `r × n`, update `B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::new",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(Self { b, a })
    }

    pub fn zeros(m: usize, n: usize, rank: usize) -> Self {
        Self {
            b: Matrix::zeros(m, rank),
            a: Matrix::zeros(rank, n),
        }
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.b, self.a)
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(m, n)` of the adapted weight.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn param_count(&self) -> usize {
        self.b.len() + self.a.len()
    }

    /// Dense update `B·A`.
    pub fn product(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)
    }
}

/// Pads `B` with zero columns and `A` with zero rows up to `target_rank`.
pub fn zero_pad(adapter: &LoraAdapter, target_rank: usize) -> Result<LoraAdapter> {
    let rank = adapter.rank();
    if target_rank < rank {
        return Err(Error::TargetRankTooSmall {
            rank,
            target: target_rank,
        });
    }
    let (m, n) = adapter.target_shape();
    let extra = target_rank - rank;
    let b = Matrix::hcat(&[&adapter.b, &Matrix::zeros(m, extra)])?;
    let a = Matrix::vcat(&[&adapter.a, &Matrix::zeros(extra, n)])?;
    LoraAdapter::new(b, a)
}

/// Location of one client's block inside a stacked pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSpan {
    pub client_id: usize,
    pub offset: usize,
    pub rank: usize,
}

/// `B_stack = [B₁ | … | B_K]` and `A_stack` = row blocks `w_k·A_k`, so that
/// `B_stack · A_stack = Σ w_k B_k A_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPair {
    pub b_stack: Matrix,
    pub a_stack: Matrix,
    pub client_spans: Vec<ClientSpan>,
}

impl StackedPair {
    pub fn rank(&self) -> usize {
        self.b_stack.cols()
    }

    pub fn product(&self) -> Result<Matrix> {
        self.b_stack.matmul(&self.a_stack)
    }

    /// Splits back into `(B_k, w_k·A_k)` per span.
    pub fn split(&self) -> Vec<(usize, Matrix, Matrix)> {
        self.client_spans
            .iter()
            .map(|s| {
                let range = s.offset..s.offset + s.rank;
                (
                    s.client_id,
                    self.b_stack.select_cols(range.clone()),
                    self.a_stack.select_rows(range),
                )
            })
            .collect()
    }

    pub fn into_adapter(self) -> LoraAdapter {
        LoraAdapter {
            b: self.b_stack,
            a: self.a_stack,
        }
    }
}

pub(crate) fn check_common_shape<A: Borrow<LoraAdapter>>(adapters: &[A]) -> Result<(usize, usize)> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::InvalidArgument("no adapters to aggregate".into()))?
        .borrow()
        .target_shape();
    for a in adapters.iter().skip(1) {
        let shape = a.borrow().target_shape();
        if shape != first {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: first,
                right: shape,
            });
        }
    }
    Ok(first)
}

/// Stacks client adapters; client ids are their positions.
pub fn stack<A: Borrow<LoraAdapter>>(adapters: &[A], weights: &[f64]) -> Result<StackedPair> {
    let ids: Vec<usize> = (0..adapters.len()).collect();
    stack_with_ids(adapters, weights, &ids)
}

pub fn stack_with_ids<A: Borrow<LoraAdapter>>(adapters: &[A], weights: &[f64], ids: &[usize]) -> Result<StackedPair> {
    check_common_shape(adapters)?;
    check_weights(weights, adapters.len())?;
    if ids.len() != adapters.len() {
        return Err(Error::InvalidArgument("one client id per adapter required".into()));
    }
    let bs: Vec<&Matrix> = adapters.iter().map(|a| &a.borrow().b).collect();
    // Weight scaling is part of assembling the stack, not a counted kernel.
    let scaled: Vec<Matrix> = adapters
        .iter()
        .zip(weights)
        .map(|(a, &w)| a.borrow().a.scale(w))
        .collect();
    let scaled_refs: Vec<&Matrix> = scaled.iter().collect();
    let b_stack = Matrix::hcat(&bs)?;
    let a_stack = Matrix::vcat(&scaled_refs)?;
    drop(scaled);
    let mut offset = 0;
    let client_spans = adapters
        .iter()
        .zip(ids)
        .map(|(a, &client_id)| {
            let rank = a.borrow().rank();
            let span = ClientSpan {
                client_id,
                offset,
                rank,
            };
            offset += rank;
            span
        })
        .collect();
    Ok(StackedPair {
        b_stack,
        a_stack,
        client_spans,
    })
}

/// Thresholded global adapter of rank `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAdapter {
    pub b_g: Matrix,
    pub a_g: Matrix,
    pub energy_retained: f64,
    pub tau: f64,
    /// Full singular spectrum of the aggregate, before truncation.
    pub spectrum: Vec<f64>,
}

impl GlobalAdapter {
    pub fn rank(&self) -> usize {
        self.b_g.cols()
    }

    pub fn product(&self) -> Result<Matrix> {
        self.b_g.matmul(&self.a_g)
    }

    pub fn to_adapter(&self) -> LoraAdapter {
        LoraAdapter {
            b: self.b_g.clone(),
            a: self.a_g.clone(),
        }
    }
}

/// Adapters for every `(layer, projection)` of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerSet {
    config: ModelConfig,
    entries: BTreeMap<MatrixKey, LoraAdapter>,
}

impl AdapterLayerSet {
    pub fn new(config: ModelConfig, entries: BTreeMap<MatrixKey, LoraAdapter>) -> Result<Self> {
        for key in config.keys() {
            let adapter = entries.get(&key).ok_or_else(|| {
                Error::DimensionInconsistency(format!("missing adapter for layer {} projection {}", key.0, key.1))
            })?;
            if adapter.target_shape() != config.dims(key) {
                return Err(Error::DimensionInconsistency(format!(
                    "adapter at {key:?} targets {:?}, config says {:?}",
                    adapter.target_shape(),
                    config.dims(key)
                )));
            }
        }
        if entries.len() != config.matrix_count() {
            return Err(Error::DimensionInconsistency(format!(
                "{} adapters for {} matrices",
                entries.len(),
                config.matrix_count()
            )));
        }
        Ok(Self { config, entries })
    }

    pub fn from_fn(config: ModelConfig, mut f: impl FnMut(MatrixKey, (usize, usize)) -> LoraAdapter) -> Result<Self> {
        let entries = config.keys().map(|k| (k, f(k, config.dims(k)))).collect();
        Self::new(config, entries)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, key: MatrixKey) -> &LoraAdapter {
        &self.entries[&key]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MatrixKey, &LoraAdapter)> {
        self.entries.iter()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(LoraAdapter::param_count).sum()
    }
}
