//! The single run configuration. Every stage reads its section from here and
//! every artifact records the hash of the whole (minus output paths).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DedupCaps, SynthConfig};
use crate::encoders::{FeatureSpec, ModelConfig};
use crate::enrichment::EnrichmentConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::tokenizer::VocabCaps;
use crate::trainer::{TaskWeights, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_end: i64,
    pub gap_days: i64,
    pub eval_days: i64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_end: 37,
            gap_days: 15,
            eval_days: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub compat: bool,
    pub weights: TaskWeights,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            compat: true,
            weights: TaskWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// Time-to-live in logical ticks.
    pub ttl: u64,
    pub capacity: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            ttl: 30 * 24 * 3600,
            capacity: 10_000,
        }
    }
}

pub type IndexConfig = crate::ann::HnswParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub zipf_s: f64,
    pub requests: usize,
    /// Synthetic latency of a cache hit, in microseconds.
    pub hit_latency_us: f64,
    /// Synthetic latency of a backend (miss) computation, in microseconds.
    pub miss_latency_us: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            zipf_s: 1.0,
            requests: 100_000,
            hit_latency_us: 200.0,
            miss_latency_us: 3_000.0,
        }
    }
}

/// Smaller training budget for the ablation matrices, which train one model
/// per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Run the ablation matrices as part of the pipeline.
    pub enabled: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub negatives: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            steps: 1500,
            batch_size: 128,
            negatives: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: SynthConfig,
    pub split: SplitConfig,
    pub dedup: DedupCaps,
    pub vocab: VocabCaps,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: TaskSection,
    pub enrichment: EnrichmentConfig,
    pub eval: EvalConfig,
    pub cache: CacheConfig,
    pub index: IndexConfig,
    pub simulate: SimulateConfig,
    pub ablation: AblationConfig,
}

pub fn default_features(world: &SynthConfig) -> Vec<FeatureSpec> {
    use crate::dataset::{FEATURE_GRAPH, FEATURE_ITEM, FEATURE_VISUAL};
    [FEATURE_GRAPH, FEATURE_VISUAL, FEATURE_ITEM]
        .into_iter()
        .map(|name| FeatureSpec {
            name: name.to_string(),
            dim: world.feature_dim,
        })
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = SynthConfig::default();
        let model = ModelConfig {
            features: default_features(&world),
            ..ModelConfig::default()
        };
        Self {
            seed: 7,
            world,
            split: SplitConfig::default(),
            dedup: DedupCaps::default(),
            vocab: VocabCaps::default(),
            model,
            train: TrainConfig::default(),
            tasks: TaskSection::default(),
            enrichment: EnrichmentConfig::default(),
            eval: EvalConfig::default(),
            cache: CacheConfig::default(),
            index: IndexConfig::default(),
            simulate: SimulateConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.adam.validate()?;
        self.enrichment.action_weights.validate()?;
        if self.split.gap_days < 0 || self.split.eval_days < 1 {
            return Err(Error::Config("split needs gap_days >= 0 and eval_days >= 1".into()));
        }
        if self.train.batch_size == 0 && self.train.plan.is_empty() {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.loss.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.eval.k == 0 || self.eval.m == 0 {
            return Err(Error::Config("eval m and k must be positive".into()));
        }
        self.index.validate()?;
        if self.cache.capacity == 0 {
            return Err(Error::Config("cache capacity must be positive".into()));
        }
        if self.tasks.compat && self.world.compat_dim != self.model.embed_dim {
            return Err(Error::Config(format!(
                "compat tasks need world.compat_dim ({}) == model.embed_dim ({})",
                self.world.compat_dim, self.model.embed_dim
            )));
        }
        if self.enrichment.cadence_days == 0 {
            return Err(Error::Config("enrichment cadence must be >= 1 day".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals
    /// and fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (path, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(value.to_string()),
            };
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut node = &mut root;
            for k in parents {
                node = node
                    .get_mut(*k)
                    .filter(|v| v.is_table())
                    .ok_or_else(|| Error::Config(format!("override {path:?}: no section {k:?}")))?;
            }
            node.as_table_mut().expect("walked into a table").insert(last.to_string(), value);
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::tokenizer::hex_digest(&Sha256::digest(&json))
    }
}
