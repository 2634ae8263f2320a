//! Whole-pipeline configuration: every module's knobs in one TOML file.
//!
//! A full snapshot of the effective configuration is persisted next to the
//! trained artifacts, so later commands (and later readers) see exactly what
//! produced them. Command-line flags override file values before the
//! snapshot is taken.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracedup_core::baselines::RemoteConfig;
use tracedup_core::embedder::EmbedderConfig;
use tracedup_core::index::{AnnParams, SearchMode};
use tracedup_core::reranker::RerankerConfig;
use tracedup_core::tokenizer::TokenizerConfig;
use tracedup_core::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub config_version: u32,
    /// Candidates retrieved per query.
    pub k: usize,
    pub use_reranker: bool,
    pub search_mode: SearchMode,
    /// Train/validation/test fractions, in chronological order.
    pub split_ratios: (f64, f64, f64),
    /// Untimed queries before latency measurement.
    pub latency_warmup: usize,
    pub tokenizer: TokenizerConfig,
    pub embedder: EmbedderConfig,
    pub reranker: RerankerConfig,
    pub ann: AnnParams,
    pub remote: RemoteConfig,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            config_version: CONFIG_VERSION,
            k: 10,
            use_reranker: true,
            search_mode: SearchMode::Auto,
            split_ratios: tracedup_core::trace::DEFAULT_SPLIT_RATIOS,
            latency_warmup: 5,
            tokenizer: TokenizerConfig::default(),
            embedder: EmbedderConfig::default(),
            reranker: RerankerConfig::default(),
            ann: AnnParams::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Artifact {
                path: "<config>".into(),
                message: format!(
                    "config version {} unsupported (expected {CONFIG_VERSION})",
                    self.config_version
                ),
            });
        }
        if self.k == 0 {
            return Err(Error::Dataset("retrieval depth k must be at least 1".into()));
        }
        let (a, b, c) = self.split_ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Dataset("split ratios must be positive and sum to 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::artifact(path, format!("invalid config: {e}")))?;
        if config.config_version != CONFIG_VERSION {
            return Err(Error::artifact(
                path,
                format!(
                    "config version {} unsupported (expected {CONFIG_VERSION})",
                    config.config_version
                ),
            ));
        }
        Ok(config)
    }

    /// Writes the snapshot. Credentials stay out of it; the key is re-read
    /// from the environment on every run that needs it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut snapshot = self.clone();
        snapshot.remote.api_key = None;
        let text = toml::to_string_pretty(&snapshot)
            .map_err(|e| Error::artifact(path, format!("config serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Applies the environment overrides for the remote embeddings client.
    pub fn apply_remote_env(&mut self) {
        if let Ok(endpoint) = std::env::var("REMOTE_EMBED_ENDPOINT") {
            if !endpoint.is_empty() {
                self.remote.endpoint = endpoint;
            }
        }
        if let Ok(key) = std::env::var("REMOTE_EMBED_KEY") {
            if !key.is_empty() {
                self.remote.api_key = Some(key);
            }
        }
    }
}
