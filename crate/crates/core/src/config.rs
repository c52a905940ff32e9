//! The single JSON configuration document shared by the CLI and the service.
//!
//! Unknown keys are rejected at every level. Relative paths are resolved
//! against the directory containing the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::IngestConfig;
use crate::eval::SplitRatios;
use crate::funnel::FunnelConfig;
use crate::llm_gateway::BackendConfig;
use crate::profiler::BudgetConfig;
use crate::promptkit::PromptBudget;

pub const DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub ads: PathBuf,
    pub advertisers: PathBuf,
    pub store_dir: PathBuf,
    pub template: PathBuf,
    pub policy: PathBuf,
    /// `{advertiser_id, label}` lines; overrides labels carried by the corpus.
    pub labels: Option<PathBuf>,
    /// `{advertiser_id, split}` lines; overrides hash-based assignment.
    pub split_overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub salt: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            salt: "acu-splits".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub funnel: FunnelConfig,
    pub budget: BudgetConfig,
    pub prompt: PromptBudget,
    pub backend: BackendConfig,
    pub splits: SplitConfig,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            ingest: IngestConfig::default(),
            funnel: FunnelConfig::default(),
            budget: BudgetConfig::default(),
            prompt: PromptBudget::default(),
            backend: BackendConfig::default(),
            splits: SplitConfig::default(),
            workers: DEFAULT_WORKERS,
        }
    }
}

impl PipelineConfig {
    /// Parses without validating, so flags can be layered on first.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let config = Self::load_unvalidated(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load_unvalidated(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.ads,
            &mut paths.advertisers,
            &mut paths.store_dir,
            &mut paths.template,
            &mut paths.policy,
        ] {
            join(p);
        }
        if let Some(p) = paths.labels.as_mut() {
            join(p);
        }
        if let Some(p) = paths.split_overrides.as_mut() {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if !(0.0..=1.0).contains(&self.ingest.flag_threshold) {
            return Err(invalid("ingest.flag_threshold must be within [0, 1]".into()));
        }
        if !self.funnel.score_floor.is_finite() || !self.funnel.fp_boost.is_finite() || self.funnel.fp_boost < 0.0 {
            return Err(invalid(
                "funnel.score_floor and funnel.fp_boost must be finite, fp_boost >= 0".into(),
            ));
        }
        self.budget.validate().map_err(|e| invalid(e.to_string()))?;
        if self.prompt.max_chars == 0 {
            return Err(invalid("prompt.max_chars must be positive".into()));
        }
        self.backend.validate().map_err(|e| invalid(e.to_string()))?;
        self.splits.ratios.validate().map_err(|e| invalid(e.to_string()))?;
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that every path needed for a full run is set.
    pub fn require_paths(&self, needed: &[&str]) -> Result<(), ConfigError> {
        for name in needed {
            let p = match *name {
                "ads" => &self.paths.ads,
                "advertisers" => &self.paths.advertisers,
                "store_dir" => &self.paths.store_dir,
                "template" => &self.paths.template,
                "policy" => &self.paths.policy,
                other => return Err(ConfigError::Invalid(format!("unknown path key {other}"))),
            };
            if p.as_os_str().is_empty() {
                return Err(ConfigError::Invalid(format!("paths.{name} is required")));
            }
        }
        Ok(())
    }
}
