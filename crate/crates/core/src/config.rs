//! Deployment configuration: one TOML file, validated on load, with a stable digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::CoveragePolicy;
use crate::evaluation::DEFAULT_EPSILON;
use crate::ingestion::SourceConfig;
use crate::pipeline::PipelineConfig;
use crate::retrieval::chunking::ChunkPolicy;
use crate::retrieval::embedding::REFERENCE_EMBEDDER_ID;
use crate::rollout::StageWindow;
use crate::text::sha256_hex;
use crate::verification::VerificationPolicy;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub lake_dir: PathBuf,
    pub trace_dir: PathBuf,
    /// Index, review queue, registry, deployments and reports.
    pub state_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            lake_dir: "data/lake".into(),
            trace_dir: "data/traces".into(),
            state_dir: "data/state".into(),
        }
    }
}

impl Paths {
    /// Resolve relative paths against `base`.
    pub fn rooted(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            lake_dir: r(&self.lake_dir),
            trace_dir: r(&self.trace_dir),
            state_dir: r(&self.state_dir),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    Mock,
    Http,
}

/// LLM client settings. The HTTP endpoint and key come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub kind: LlmKind,
    pub id: String,
    pub timeout_ms: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            kind: LlmKind::Mock,
            id: "mock-extractive-v1".into(),
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSourceConfig {
    pub id: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub thresholds: BTreeMap<String, f64>,
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            thresholds: [("recall@5".to_string(), 0.8), ("faithfulness".to_string(), 0.6)].into(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeploymentConfig {
    pub config_version: u32,
    pub paths: Paths,
    pub sources: Vec<SourceConfig>,
    pub chunking: ChunkPolicy,
    pub embedder_id: String,
    pub verification: VerificationPolicy,
    pub pipeline: PipelineConfig,
    /// Further pipeline versions available as rollout candidates.
    pub candidates: Vec<PipelineConfig>,
    pub coverage: CoveragePolicy,
    pub gate: GateConfig,
    /// Live thresholds whose breach raises a metric alert.
    pub live_thresholds: BTreeMap<String, f64>,
    pub stage_window: StageWindow,
    pub llm: LlmSettings,
    pub api_sources: Vec<ApiSourceConfig>,
    pub trace_buffer: usize,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_SCHEMA_VERSION,
            paths: Paths::default(),
            sources: Vec::new(),
            chunking: ChunkPolicy::default(),
            embedder_id: REFERENCE_EMBEDDER_ID.into(),
            verification: VerificationPolicy::default(),
            pipeline: PipelineConfig::default(),
            candidates: Vec::new(),
            coverage: CoveragePolicy::default(),
            gate: GateConfig::default(),
            live_thresholds: [("faithfulness".to_string(), 0.5), ("latency.answer_ms.p95".to_string(), 5000.0)].into(),
            stage_window: StageWindow::default(),
            llm: LlmSettings::default(),
            api_sources: Vec::new(),
            trace_buffer: crate::observability::DEFAULT_BUFFER,
        }
    }
}

fn check_thresholds(kind: &str, t: &BTreeMap<String, f64>) -> Result<(), ConfigError> {
    for (name, &v) in t {
        let ok = if name.starts_with("latency.") {
            v >= 0.0 && v.is_finite()
        } else {
            (0.0..=1.0).contains(&v)
        };
        if !ok {
            return Err(ConfigError::Invalid(format!("{kind} threshold {name} = {v} out of range")));
        }
    }
    Ok(())
}

/// Parse a reference-embedder id of the form `hash-bow-<dim>-v1`.
pub fn embedder_dim(id: &str) -> Option<usize> {
    id.strip_prefix("hash-bow-")?.strip_suffix("-v1")?.parse().ok().filter(|&d| d > 0)
}

impl DeploymentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths = cfg.paths.rooted(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        if self.config_version != CONFIG_SCHEMA_VERSION {
            return Err(bad(format!(
                "config_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.config_version
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sources {
            s.validate().map_err(bad)?;
            if !ids.insert(&s.source_id) {
                return Err(bad(format!("duplicate source_id {}", s.source_id)));
            }
        }
        self.chunking.validate().map_err(bad)?;
        if embedder_dim(&self.embedder_id).is_none() {
            return Err(bad(format!("unknown embedder {:?}", self.embedder_id)));
        }
        self.verification.validate().map_err(bad)?;
        let mut versions = std::collections::BTreeSet::new();
        for p in std::iter::once(&self.pipeline).chain(&self.candidates) {
            p.validate().map_err(|e| bad(e.to_string()))?;
            if !p.templates.contains_key(&p.template_id) {
                return Err(bad(format!("pipeline {}: template {:?} not defined", p.version, p.template_id)));
            }
            if !versions.insert(&p.version) {
                return Err(bad(format!("duplicate pipeline version {}", p.version)));
            }
            for r in &p.planner.api_routes {
                if !self.api_sources.iter().any(|a| a.id == r.id) {
                    return Err(bad(format!("api route {} has no api_sources entry", r.id)));
                }
            }
        }
        self.coverage.validate().map_err(bad)?;
        check_thresholds("gate", &self.gate.thresholds)?;
        check_thresholds("live", &self.live_thresholds)?;
        if !(0.0..=1.0).contains(&self.gate.epsilon) {
            return Err(bad("gate.epsilon must lie in [0, 1]".into()));
        }
        if self.trace_buffer == 0 {
            return Err(bad("trace_buffer must be at least 1".into()));
        }
        Ok(())
    }

    /// Digest of the whole configuration (canonical JSON, sorted keys).
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(&serde_json::to_value(self).expect("config serializes")).unwrap())
    }

    /// Digest identifying one pipeline version: everything that shapes its answers.
    pub fn version_digest(&self, version: &str) -> Option<String> {
        let p = self.pipeline_config(version)?;
        let body = serde_json::json!({
            "chunking": self.chunking,
            "embedder_id": self.embedder_id,
            "pipeline": p,
            "llm_id": self.llm.id,
        });
        Some(sha256_hex(&serde_json::to_vec(&body).unwrap()))
    }

    pub fn pipeline_config(&self, version: &str) -> Option<&PipelineConfig> {
        std::iter::once(&self.pipeline)
            .chain(&self.candidates)
            .find(|p| p.version == version)
    }

    pub fn source(&self, id: &str) -> Option<&SourceConfig> {
        self.sources.iter().find(|s| s.source_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_digest_is_stable() {
        let mut cfg = DeploymentConfig::default();
        cfg.sources.push(SourceConfig::new("docs", crate::ingestion::SourceKind::FileDir, "docs"));
        let text = cfg.to_toml();
        let a = DeploymentConfig::from_toml(&text).unwrap();
        let b = DeploymentConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest(), cfg.digest());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = DeploymentConfig::default();
        cfg.gate.thresholds.insert("recall@5".into(), 1.5);
        assert!(cfg.validate().is_err());
        let mut cfg = DeploymentConfig::default();
        cfg.pipeline.template_id = "nope".into();
        assert!(cfg.validate().is_err());
        assert!(DeploymentConfig::from_toml("config_version = 7").is_err());
        assert!(DeploymentConfig::from_toml("").is_ok());
    }

    #[test]
    fn version_digest_changes_with_pipeline() {
        let mut cfg = DeploymentConfig::default();
        let mut cand = cfg.pipeline.clone();
        cand.version = "v2".into();
        cand.planner.vector_k = 20;
        cfg.candidates.push(cand);
        assert_ne!(cfg.version_digest("v1"), cfg.version_digest("v2"));
        assert!(cfg.version_digest("v3").is_none());
    }
}
