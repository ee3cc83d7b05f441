//! Federated LoRA aggregation.
//!
//! Five server-side strategies for combining client low-rank adapters
//! (FedIT, FFA-LoRA, FLoRA, FlexLoRA and FLoRIST), a dense reference
//! aggregate they are checked against, closed-form communication, FLOP and
//! memory accounting, and a seeded federated simulator over a synthetic
//! planted-low-rank regression task.
//!
//! FLoRIST never forms the dense `m × n` update. It decomposes the stacked
//! factors separately, combines them through a small `r × r` core and keeps
//! the smallest rank reaching a target fraction of singular-value energy.

pub mod adapters;
pub mod aggregation;
pub mod costmodel;
pub mod error;
pub mod fedsim;
pub mod seed;
pub mod tensor;

pub use adapters::{
    stack, zero_pad, AdapterLayerSet, ClientConfig, GlobalAdapter, LoraAdapter, ModelConfig, StackedPair,
};
pub use aggregation::{
    aggregate_model, energy_rank, fedit_aggregate, ffa_aggregate, flexlora_aggregate, flora_aggregate,
    florist_aggregate, oracle_delta_w, AggregateOutput, FlexLoraOutput, Method, ModelAggregate, ThresholdPolicy,
    ThresholdVariant,
};
pub use costmodel::{CostReport, CostScenario};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{frobenius_norm, matmul, thin_svd, Matrix, SvdFactors};
