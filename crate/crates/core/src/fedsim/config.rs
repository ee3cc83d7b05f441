//! Experiment configuration, read from TOML or JSON.
//!
//! Every field has a default, so an empty file is a valid config describing
//! the desk-scale setup: 4 layers of 64×64 `q_proj`/`v_proj`, eight clients
//! with ranks `[4, 4, 8, 8, 16, 16, 32, 64]`, planted rank 3, σ = 0.01,
//! 50 local epochs at learning rate 0.05.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{ClientConfig, ModelConfig, DEFAULT_BYTES_PER_PARAM};
use crate::aggregation::{Method, ThresholdPolicy, ThresholdVariant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub tau: f64,
    pub tau_variant: ThresholdVariant,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch: BatchPolicy,
    pub noise: f64,
    pub planted_rank: usize,
    pub holdout_samples: usize,
    /// Train clients (and aggregate matrices) on the rayon pool.
    pub parallel: bool,
    /// Round-trip every transmitted matrix through its wire precision.
    pub quantize_transmission: bool,
    pub model: ModelSpec,
    pub clients: Vec<ClientSpec>,
    pub sweep: SweepSpec,
    pub cost: CostSpec,
    pub compare: CompareSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            method: Method::Florist,
            tau: 0.99,
            tau_variant: ThresholdVariant::Fixed,
            rounds: 3,
            local_epochs: 50,
            learning_rate: 0.05,
            batch: BatchPolicy::FullBatch,
            noise: 0.01,
            planted_rank: 3,
            holdout_samples: 256,
            parallel: true,
            quantize_transmission: false,
            model: ModelSpec::default(),
            clients: default_clients(),
            sweep: SweepSpec::default(),
            cost: CostSpec::default(),
            compare: CompareSpec::default(),
        }
    }
}

pub const DEFAULT_CLIENT_RANKS: [usize; 8] = [4, 4, 8, 8, 16, 16, 32, 64];
const DEFAULT_DATASET_SIZES: [usize; 8] = [120, 96, 144, 104, 128, 112, 136, 160];

fn default_clients() -> Vec<ClientSpec> {
    DEFAULT_CLIENT_RANKS
        .iter()
        .zip(DEFAULT_DATASET_SIZES)
        .map(|(&rank, dataset_size)| ClientSpec { rank, dataset_size })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BatchPolicy {
    #[default]
    FullBatch,
    /// Seeded shuffled mini-batches of `size` samples.
    MiniBatch { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub rank: usize,
    pub dataset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub name: String,
    /// Output dimension.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// `desk`, `tinyllama` or `llama-7b`; explicit fields are ignored when set.
    pub preset: Option<String>,
    pub layers: usize,
    pub projections: Vec<ProjectionSpec>,
    pub bytes_per_param: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            preset: None,
            layers: 4,
            projections: vec![
                ProjectionSpec {
                    name: "q_proj".into(),
                    m: 64,
                    n: 64,
                },
                ProjectionSpec {
                    name: "v_proj".into(),
                    m: 64,
                    n: 64,
                },
            ],
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let bpp = self.bytes_per_param;
        match self.preset.as_deref() {
            None => {
                let projections: Vec<_> = self.projections.iter().map(|p| (p.name.as_str(), p.m, p.n)).collect();
                if self.layers == 0 {
                    return Err(Error::config("model.layers", "must be at least 1"));
                }
                ModelConfig::uniform(self.layers, &projections, bpp)
            }
            Some("desk") => ModelConfig::uniform(4, &[("q_proj", 64, 64), ("v_proj", 64, 64)], bpp),
            Some("tinyllama") => presets::tinyllama(bpp),
            Some("llama-7b") => presets::llama_7b(bpp),
            Some(other) => Err(Error::config("model.preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Reference model shapes for cost accounting.
pub mod presets {
    use super::*;

    /// 22 layers, hidden 2048, grouped-query `v_proj` of 256 outputs.
    pub fn tinyllama(bytes_per_param: usize) -> Result<ModelConfig> {
        ModelConfig::uniform(22, &[("q_proj", 2048, 2048), ("v_proj", 256, 2048)], bytes_per_param)
    }

    /// 32 layers of 4096×4096 `q_proj`/`v_proj`.
    pub fn llama_7b(bytes_per_param: usize) -> Result<ModelConfig> {
        ModelConfig::uniform(32, &[("q_proj", 4096, 4096), ("v_proj", 4096, 4096)], bytes_per_param)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Explicit grid; overrides `start`/`stop`/`step`.
    pub taus: Option<Vec<f64>>,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            taus: None,
            start: 0.80,
            stop: 1.00,
            step: 0.01,
        }
    }
}

impl SweepSpec {
    /// The τ grid, endpoints included.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let grid = match &self.taus {
            Some(t) => t.clone(),
            None => {
                if self.step.is_nan() || self.step <= 0.0 || self.stop < self.start {
                    return Err(Error::config("sweep.step", "need step > 0 and stop >= start"));
                }
                let steps = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
                let mut g: Vec<f64> = (0..=steps)
                    .map(|i| {
                        let t = self.start + i as f64 * self.step;
                        (t * 1e9).round() / 1e9
                    })
                    .collect();
                if g.last().is_some_and(|&t| (t - self.stop).abs() > 1e-9) {
                    g.push(self.stop);
                }
                g
            }
        };
        if grid.is_empty() {
            return Err(Error::config("sweep.taus", "empty threshold grid"));
        }
        for &t in &grid {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config("sweep.taus", format!("threshold {t} outside (0, 1]")));
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub client_counts: Vec<usize>,
    /// Upper bound when searching for the FLoRA / full fine-tuning crossover.
    pub max_crossover_clients: usize,
    /// Fixed FLoRIST ranks per `(layer, projection)`; otherwise one simulated round provides them.
    pub florist_ranks: Option<Vec<usize>>,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            client_counts: vec![2, 4, 8, 16, 32, 64],
            max_crossover_clients: 100_000,
            florist_ranks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSpec {
    /// Rank every client uses in the homogeneous cohort.
    pub homogeneous_rank: usize,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self { homogeneous_rank: 16 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(|| "<root>".to_string(), |s| location(text, s.start));
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `.json` files as JSON and everything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ThresholdPolicy::new(self.tau, self.tau_variant)
            .map_err(|_| Error::config("tau", format!("{} is outside (0, 1]", self.tau)))?;
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        if self.planted_rank == 0 {
            return Err(Error::config("planted_rank", "must be at least 1"));
        }
        if self.holdout_samples == 0 {
            return Err(Error::config("holdout_samples", "must be at least 1"));
        }
        if let BatchPolicy::MiniBatch { size: 0 } = self.batch {
            return Err(Error::config("batch.size", "must be at least 1"));
        }
        if self.method == Method::FullFt {
            return Err(Error::config("method", "full-ft is only available in cost reports"));
        }
        if self.clients.is_empty() {
            return Err(Error::config("clients", "need at least one client"));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.rank == 0 {
                return Err(Error::config(format!("clients[{i}].rank"), "must be at least 1"));
            }
            if c.dataset_size == 0 {
                return Err(Error::config(
                    format!("clients[{i}].dataset_size"),
                    "must be at least 1",
                ));
            }
        }
        if self.compare.homogeneous_rank == 0 {
            return Err(Error::config("compare.homogeneous_rank", "must be at least 1"));
        }
        if self.cost.client_counts.windows(2).any(|w| w[0] >= w[1]) || self.cost.client_counts.contains(&0) {
            return Err(Error::config("cost.client_counts", "must be positive and ascending"));
        }
        self.model.to_config()?;
        self.sweep.grid()?;
        Ok(())
    }

    pub fn policy(&self) -> ThresholdPolicy {
        ThresholdPolicy {
            tau: self.tau,
            variant: self.tau_variant,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.to_config()
    }

    /// Clients with ids assigned by position.
    pub fn client_configs(&self) -> Vec<ClientConfig> {
        self.clients
            .iter()
            .enumerate()
            .map(|(i, c)| ClientConfig::new(i, c.rank, c.dataset_size))
            .collect()
    }
}

fn location(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    format!("line {line} column {col}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
        assert_eq!(
            ExperimentConfig::from_json_str("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn bad_tau_names_the_field() {
        let err = ExperimentConfig::from_toml_str("tau = 1.5").unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn parses_full_toml() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            method = "flora"
            rounds = 2
            batch = { mode = "mini-batch", size = 16 }
            [model]
            layers = 2
            projections = [{ name = "q_proj", m = 8, n = 6 }]
            [[clients]]
            rank = 2
            dataset_size = 10
            [sweep]
            taus = [0.5, 1.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Flora);
        assert_eq!(cfg.batch, BatchPolicy::MiniBatch { size: 16 });
        assert_eq!(cfg.model_config().unwrap().dims((1, 0)), (8, 6));
        assert_eq!(cfg.client_configs(), vec![ClientConfig::new(0, 2, 10)]);
        assert_eq!(cfg.sweep.grid().unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn default_grid_covers_endpoints() {
        let g = SweepSpec::default().grid().unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.8);
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn presets_resolve() {
        let spec = ModelSpec {
            preset: Some("llama-7b".into()),
            ..ModelSpec::default()
        };
        let cfg = spec.to_config().unwrap();
        assert_eq!(cfg.layers(), 32);
        assert!(ModelSpec {
            preset: Some("gpt".into()),
            ..ModelSpec::default()
        }
        .to_config()
        .is_err());
    }
}
