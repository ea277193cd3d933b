//! Run configuration: a TOML file with sections, overridden by CLI flags.
//!
//! ```toml
//! [store]
//! train = "data/train.jsonl"
//! test = "data/test.jsonl"
//! embeddings = "data/embeddings.json"
//!
//! [pipeline]
//! strategy = "avg_sim"
//! n = 10
//! m = 9
//! k = 5
//!
//! [template]
//! head = "Please answer the question according to the context."
//!
//! [decode]
//! beam_size = 2
//!
//! [backend]
//! kind = "http"
//! endpoint_url = "http://127.0.0.1:8080/complete"
//!
//! [run]
//! seed = 0
//! jobs = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, DecodeParams};
use crate::error::{Error, Result};
use crate::pipeline::{CaptionSource, PipelineConfig};
use crate::prompt_builder::{PromptTemplate, DEFAULT_MAX_TOKENS};
use crate::shot_selector::Strategy;
use crate::vqa_eval::MetricVariant;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorePaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Neighbor file for the precomputed strategy.
    pub neighbors: Option<PathBuf>,
}

impl StorePaths {
    pub fn require(&self) -> Result<(&Path, &Path, &Path)> {
        fn get<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
            p.as_deref()
                .ok_or_else(|| Error::input(format!("store path {name} is not set (--{name})")))
        }
        Ok((
            get(&self.train, "train")?,
            get(&self.test, "test")?,
            get(&self.embeddings, "embeddings")?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// `avg_sim`, `random`, `random(seed=N)` or `precomputed`. Plain
    /// `random` takes its seed from `[run] seed`.
    pub strategy: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub max_tokens: usize,
    pub caption_source: CaptionSource,
    pub metric: MetricVariant,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::default();
        Self {
            strategy: d.strategy.to_string(),
            n: d.n,
            m: d.m,
            k: d.k,
            max_tokens: DEFAULT_MAX_TOKENS,
            caption_source: d.caption_source,
            metric: d.metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
    /// Only the first `limit` test samples (by id).
    pub limit: Option<usize>,
    /// Score predictions in the same run.
    pub score: bool,
    /// Write `replay.log`.
    pub record_replay: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 4,
            limit: None,
            score: false,
            record_replay: true,
        }
    }
}

/// Fully serialized into every run manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub store: StorePaths,
    pub pipeline: PipelineSection,
    pub template: PromptTemplate,
    pub decode: DecodeParams,
    pub backend: BackendConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(e.to_string()))
    }

    pub fn strategy(&self) -> Result<Strategy> {
        resolve_strategy(&self.pipeline.strategy, self.run.seed)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            strategy: self.strategy()?,
            n: self.pipeline.n,
            m: self.pipeline.m,
            k: self.pipeline.k,
            max_tokens: self.pipeline.max_tokens,
            caption_source: self.pipeline.caption_source,
            metric: self.pipeline.metric,
            template: self.template.clone(),
            decode: self.decode.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a strategy name; a bare `random` gets `default_seed`.
pub fn resolve_strategy(name: &str, default_seed: u64) -> Result<Strategy> {
    if name.trim() == "random" {
        return Ok(Strategy::Random { seed: default_seed });
    }
    name.parse()
}
