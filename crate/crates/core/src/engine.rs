//! The operable system: lake, review queue, index, traces, pipelines,
//! rollout state and reports behind one handle.
//!
//! Queries run concurrently. Administrative mutations (ingest, review,
//! reindex, rollback, deployment changes) are serialized behind a control lock.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::config::{embedder_dim, ConfigError, DeploymentConfig, LlmKind};
use crate::coverage::{
    check_thresholds, generation_coverage, live_metric_report, query_coverage, retrieval_coverage,
    vocabulary_coverage, Alert, AlertKind, Axis, CoverageError, CoverageReport, LiveMetricReport, ReportStore,
    Window,
};
use crate::datalake::{DataLake, DocumentVersion, IntegrityInputs, IntegrityReport, LakeError};
use crate::evaluation::{gate_release, run_suite, Level, MetricReport, SuiteError, SuiteParams, SuiteVerdict, TestCase};
use crate::ingestion::{
    ingest_batch, parse_feed, poll_source, IngestError, IngestReceipt, Normalizer, QuarantineRecord, RawItem,
    SourceConfig, SourceCursor, SourceKind,
};
use crate::observability::{LineageGraph, ResponseRecord, TraceError, TraceTree, Tracer};
use crate::pipeline::clients::{HttpApiClient, HttpLlmClient, LlmClient, MockLlm};
use crate::pipeline::{AnswerOptions, FinalResponse, Pipeline, PipelineError};
use crate::retrieval::embedding::{Embedder, HashingEmbedder};
use crate::retrieval::index::{IndexEpoch, IndexError, RetrievalIndex};
use crate::rollout::{
    self, compare_shadow, ComparisonReport, Deployment, DeploymentStatus, FeedbackRecord, Registry, RolloutError,
    Strategy, VersionState,
};
use crate::text::sha256_hex;
use crate::verification::{
    ConflictTicket, CorpusView, Gatekeeper, Resolution, ResolutionRecord, TicketStore, VerificationReport, VerifyError,
};

const STATE_FILE: &str = "state.json";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lake(#[from] LakeError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error("{0}")]
    Invalid(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("state file: {0}")]
    State(String),
}

/// Coarse error classes; the CLI maps them to exit codes, HTTP to status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Invalid,
    NotFound,
    AccessDenied,
    Rejected,
    Conflict,
    Unavailable,
    Internal,
}

impl EngineError {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind as K;
        match self {
            Self::Config(_) | Self::Suite(_) | Self::Invalid(_) => K::Invalid,
            Self::NotFound(_) => K::NotFound,
            Self::State(_) => K::Internal,
            Self::Lake(e) => match e {
                LakeError::NotFound(_) => K::NotFound,
                LakeError::AccessDenied { .. } => K::AccessDenied,
                LakeError::PolicyViolation(_) | LakeError::InvalidTarget(_) | LakeError::OutOfRange { .. } => K::Invalid,
                LakeError::Corrupt(_) | LakeError::Io(_) => K::Internal,
            },
            Self::Verify(e) => match e {
                VerifyError::NotFound(_) => K::NotFound,
                VerifyError::InvalidTransition { .. } => K::Conflict,
                VerifyError::Lake(_) => K::Internal,
            },
            Self::Ingest(e) => match e {
                IngestError::SourceUnreachable { .. } => K::Unavailable,
                _ => K::Invalid,
            },
            Self::Index(_) => K::Internal,
            Self::Pipeline(e) => match e {
                PipelineError::RejectedInput(_) => K::Rejected,
                PipelineError::Config(_) => K::Invalid,
                _ => K::Unavailable,
            },
            Self::Trace(e) => match e {
                TraceError::NotFound(_) => K::NotFound,
                _ => K::Internal,
            },
            Self::Rollout(e) => match e {
                RolloutError::UnknownVersion(_) => K::NotFound,
                RolloutError::Invalid(_) => K::Invalid,
                _ => K::Conflict,
            },
            Self::Coverage(e) => match e {
                CoverageError::Config(_) => K::Invalid,
                _ => K::Internal,
            },
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct PersistedState {
    registry: Registry,
    deployment: Option<Deployment>,
    past_deployments: Vec<Deployment>,
    feedback: Vec<FeedbackRecord>,
    cursors: BTreeMap<String, SourceCursor>,
    tickets: TicketStore,
    quarantine: Vec<QuarantineRecord>,
}

struct Review {
    gate: Gatekeeper,
    view: CorpusView,
}

struct Rollout {
    registry: Registry,
    deployment: Option<Deployment>,
    past: Vec<Deployment>,
    feedback: Vec<FeedbackRecord>,
}

#[derive(Default)]
struct Sources {
    cursors: BTreeMap<String, SourceCursor>,
    quarantine: Vec<QuarantineRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub receipt: IngestReceipt,
    /// Count per verification decision.
    pub decisions: BTreeMap<String, usize>,
    pub reports: Vec<VerificationReport>,
    pub open_tickets: usize,
    pub lake_seq: u64,
    pub index: IndexEpoch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub pipeline_version: Option<String>,
    pub index_epoch: u64,
    pub lake_seq: u64,
    pub chunk_count: usize,
    pub live_documents: usize,
    pub open_tickets: usize,
    pub open_alerts: usize,
    pub deployment: Option<String>,
    pub dropped_trace_events: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageOutcome {
    pub reports: Vec<CoverageReport>,
    /// Axes that could not be computed, with the reason.
    pub skipped: Vec<(Axis, String)>,
    pub alerts: Vec<Alert>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveCheck {
    pub reports: Vec<LiveMetricReport>,
    pub alerts: Vec<Alert>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateOutcome {
    pub verdict: SuiteVerdict,
    pub version: String,
    pub state: VersionState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutStatus {
    pub live: Option<String>,
    pub registry: Registry,
    pub deployment: Option<Deployment>,
    pub past_deployments: Vec<Deployment>,
    pub feedback: Vec<FeedbackRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeployRequest {
    pub strategy: Strategy,
    pub candidate: String,
    #[serde(default)]
    pub ab_pct: u8,
    /// `(stage_number, exposure_pct)` pairs for staged rollouts.
    #[serde(default)]
    pub schedule: Vec<(u32, u8)>,
}

pub struct Engine {
    config: DeploymentConfig,
    clock: Arc<dyn Clock>,
    embedder: Arc<dyn Embedder>,
    lake: RwLock<DataLake>,
    review: Mutex<Review>,
    index: RetrievalIndex,
    tracer: Tracer,
    pipelines: BTreeMap<String, Arc<Pipeline>>,
    rollout: Mutex<Rollout>,
    sources: Mutex<Sources>,
    reports: ReportStore,
    normalizer: Normalizer,
    control: Mutex<()>,
    state_dir: Option<PathBuf>,
}

fn build_llm(config: &DeploymentConfig) -> Result<Arc<dyn LlmClient>> {
    match config.llm.kind {
        LlmKind::Mock => Ok(Arc::new(MockLlm::default())),
        LlmKind::Http => HttpLlmClient::from_env(&config.llm.id, Duration::from_millis(config.llm.timeout_ms))
            .map(|c| Arc::new(c) as Arc<dyn LlmClient>)
            .ok_or_else(|| EngineError::Invalid("llm.kind = http needs RAGOPS_LLM_ENDPOINT".into())),
    }
}

fn gatekeeper(config: &DeploymentConfig, tickets: TicketStore) -> Gatekeeper {
    let mut g = Gatekeeper::new(config.verification.clone());
    for s in &config.sources {
        g.trust.insert(s.source_id.clone(), s.trust_weight);
        if let Some(cap) = s.size_cap {
            g.size_caps.insert(s.source_id.clone(), cap);
        }
    }
    g.tickets = tickets;
    g
}

fn decision_name<T: Serialize>(d: &T) -> String {
    serde_json::to_value(d)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl Engine {
    /// Open the persistent deployment described by `config`.
    pub fn open(config: DeploymentConfig) -> Result<Self> {
        let llm = build_llm(&config)?;
        Self::build(config, Arc::new(SystemClock), llm, true)
    }

    /// A fully in-memory engine; `llm` overrides the configured client.
    pub fn in_memory(config: DeploymentConfig, clock: Arc<dyn Clock>, llm: Option<Arc<dyn LlmClient>>) -> Result<Self> {
        let llm = match llm {
            Some(l) => l,
            None => build_llm(&config)?,
        };
        Self::build(config, clock, llm, false)
    }

    fn build(config: DeploymentConfig, clock: Arc<dyn Clock>, llm: Arc<dyn LlmClient>, persistent: bool) -> Result<Self> {
        config.validate()?;
        let dim = embedder_dim(&config.embedder_id).expect("validated");
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::with_dim(dim));

        let (lake, tracer, reports, state, state_dir) = if persistent {
            let p = &config.paths;
            std::fs::create_dir_all(&p.state_dir).map_err(|e| EngineError::State(e.to_string()))?;
            let state_path = p.state_dir.join(STATE_FILE);
            let state: PersistedState = if state_path.exists() {
                let bytes = std::fs::read(&state_path).map_err(|e| EngineError::State(e.to_string()))?;
                serde_json::from_slice(&bytes).map_err(|e| EngineError::State(e.to_string()))?
            } else {
                PersistedState::default()
            };
            (
                DataLake::open(&p.lake_dir)?,
                Tracer::open(&p.trace_dir, config.trace_buffer)?,
                ReportStore::open(&p.state_dir)?,
                state,
                Some(p.state_dir.clone()),
            )
        } else {
            (
                DataLake::in_memory(),
                Tracer::in_memory(config.trace_buffer),
                ReportStore::in_memory(),
                PersistedState::default(),
                None,
            )
        };

        let index = match state_dir.as_ref().map(|d| d.join(INDEX_FILE)).filter(|p| p.exists()) {
            Some(path) => match RetrievalIndex::load(&path, embedder.clone(), config.chunking) {
                Ok(ix) if ix.epoch().embedder_id == config.embedder_id => {
                    // reopening an up-to-date index keeps its epoch
                    if ix.epoch().lake_seq_covered < lake.current_seq() && ix.sync(&lake).is_err() {
                        ix.rebuild(&lake);
                    }
                    ix
                }
                _ => {
                    log::warn!("index file unusable; rebuilding from the lake");
                    let ix = RetrievalIndex::new(embedder.clone(), config.chunking);
                    ix.rebuild(&lake);
                    ix
                }
            },
            None => {
                let ix = RetrievalIndex::new(embedder.clone(), config.chunking);
                ix.sync(&lake)?;
                ix
            }
        };

        let mut pipelines = BTreeMap::new();
        for pc in std::iter::once(&config.pipeline).chain(&config.candidates) {
            let mut p = Pipeline::new(pc.clone(), llm.clone(), tracer.clone(), clock.clone())?;
            for a in &config.api_sources {
                p = p.with_api_client(Arc::new(HttpApiClient {
                    id: a.id.clone(),
                    endpoint: a.endpoint.clone(),
                }));
            }
            pipelines.insert(pc.version.clone(), Arc::new(p));
        }

        let mut registry = state.registry;
        for v in pipelines.keys() {
            let digest = config.version_digest(v).expect("configured version");
            registry.register(v, &digest)?;
        }
        if registry.live().is_none() {
            // the first version has no baseline to gate against
            let v = &config.pipeline.version;
            if registry.state(v)? == VersionState::Draft {
                registry.mark_offline_passed(v, "bootstrap", clock.now())?;
            }
            registry.bootstrap(v, clock.now())?;
        }

        let view = CorpusView::from_lake(&lake, embedder.as_ref());
        let mut gate = gatekeeper(&config, state.tickets);
        gate.after_lake_change(&lake);

        let engine = Self {
            clock,
            embedder,
            lake: RwLock::new(lake),
            review: Mutex::new(Review { gate, view }),
            index,
            tracer,
            pipelines,
            rollout: Mutex::new(Rollout {
                registry,
                deployment: state.deployment,
                past: state.past_deployments,
                feedback: state.feedback,
            }),
            sources: Mutex::new(Sources {
                cursors: state.cursors,
                quarantine: state.quarantine,
            }),
            reports,
            normalizer: Normalizer::new(),
            control: Mutex::new(()),
            state_dir,
            config,
        };
        engine.persist(true)?;
        Ok(engine)
    }

    fn persist(&self, with_index: bool) -> Result<()> {
        let Some(dir) = &self.state_dir else {
            return Ok(());
        };
        let state = {
            let r = self.rollout.lock();
            let s = self.sources.lock();
            PersistedState {
                registry: r.registry.clone(),
                deployment: r.deployment.clone(),
                past_deployments: r.past.clone(),
                feedback: r.feedback.clone(),
                cursors: s.cursors.clone(),
                tickets: self.review.lock().gate.tickets.clone(),
                quarantine: s.quarantine.clone(),
            }
        };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(&state).map_err(|e| EngineError::State(e.to_string()))?;
        std::fs::write(&tmp, body)
            .and_then(|_| std::fs::rename(&tmp, dir.join(STATE_FILE)))
            .map_err(|e| EngineError::State(e.to_string()))?;
        if with_index {
            self.index.save(&dir.join(INDEX_FILE))?;
        }
        Ok(())
    }

    pub fn config(&self) -> &DeploymentConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn reports(&self) -> &ReportStore {
        &self.reports
    }

    pub fn lake(&self) -> RwLockReadGuard<'_, DataLake> {
        self.lake.read()
    }

    pub fn pipeline(&self, version: &str) -> Result<Arc<Pipeline>> {
        self.pipelines
            .get(version)
            .cloned()
            .ok_or_else(|| RolloutError::UnknownVersion(version.to_string()).into())
    }

    pub fn versions(&self) -> Vec<String> {
        self.pipelines.keys().cloned().collect()
    }

    pub fn live_version(&self) -> Option<String> {
        self.rollout.lock().registry.live().map(str::to_string)
    }

    // ---- ingestion and verification

    /// Source config by id; a path that is not a configured id becomes a
    /// one-off source (directory or JSONL feed).
    pub fn resolve_source(&self, source: &str) -> Result<SourceConfig> {
        if let Some(s) = self.config.source(source) {
            return Ok(s.clone());
        }
        let path = Path::new(source);
        if !path.exists() {
            return Err(EngineError::NotFound(format!("source {source}")));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "local".into());
        let kind = if path.is_dir() {
            SourceKind::FileDir
        } else {
            SourceKind::JsonlFeed
        };
        Ok(SourceConfig::new(name, kind, source))
    }

    fn manual_source(&self, source_id: &str) -> SourceConfig {
        self.config
            .source(source_id)
            .cloned()
            .unwrap_or_else(|| SourceConfig::new(source_id, SourceKind::Manual, ""))
    }

    /// Normalize, verify and store a batch of raw items.
    pub fn ingest_items(&self, source_id: &str, items: &[RawItem]) -> Result<IngestSummary> {
        let cfg = self.manual_source(source_id);
        let _g = self.control.lock();
        let receipt = ingest_batch(items, &cfg, &self.normalizer);
        self.admit_receipt(receipt)
    }

    /// Parse a JSONL feed body and ingest it.
    pub fn ingest_jsonl(&self, source_id: &str, body: &str) -> Result<IngestSummary> {
        let cfg = self.manual_source(source_id);
        let body = if body.ends_with('\n') || body.is_empty() {
            body.to_string()
        } else {
            format!("{body}\n")
        };
        let out = parse_feed(&cfg, &body, &SourceCursor::default(), self.clock.now());
        let _g = self.control.lock();
        self.sources.lock().quarantine.extend(out.quarantined.iter().cloned());
        let mut receipt = ingest_batch(&out.items, &cfg, &self.normalizer);
        receipt.total += out.quarantined.len();
        receipt.quarantined += out.quarantined.len();
        receipt.quarantine.extend(out.quarantined);
        self.admit_receipt(receipt)
    }

    /// Poll a configured source (or a path) from its cursor and ingest what changed.
    pub fn ingest_source(&self, source: &str) -> Result<IngestSummary> {
        let cfg = self.resolve_source(source)?;
        let _g = self.control.lock();
        let cursor = self.sources.lock().cursors.get(&cfg.source_id).cloned().unwrap_or_default();
        let out = poll_source(&cfg, &cursor)?;
        let mut receipt = ingest_batch(&out.items, &cfg, &self.normalizer);
        receipt.total += out.quarantined.len();
        receipt.quarantined += out.quarantined.len();
        receipt.quarantine.extend(out.quarantined);
        self.sources.lock().cursors.insert(cfg.source_id.clone(), out.cursor);
        self.admit_receipt(receipt)
    }

    fn admit_receipt(&self, mut receipt: IngestReceipt) -> Result<IngestSummary> {
        let docs = std::mem::take(&mut receipt.documents);
        let mut decisions = BTreeMap::new();
        let mut reports = Vec::with_capacity(docs.len());
        let (lake_seq, index, open_tickets) = {
            let mut lake = self.lake.write();
            let mut review = self.review.lock();
            let Review { gate, view } = &mut *review;
            for doc in &docs {
                let out = gate.admit(doc, &mut lake, view, self.embedder.as_ref())?;
                *decisions.entry(decision_name(&out.report.decision)).or_insert(0) += 1;
                reports.push(out.report);
            }
            (lake.current_seq(), self.index.sync(&lake)?, gate.tickets.open().count())
        };
        self.sources.lock().quarantine.extend(receipt.quarantine.iter().cloned());
        self.persist(true)?;
        Ok(IngestSummary {
            receipt,
            decisions,
            reports,
            open_tickets,
            lake_seq,
            index,
        })
    }

    /// Run verification on a batch without storing anything.
    pub fn verify_items(&self, source_id: &str, items: &[RawItem]) -> Result<Vec<VerificationReport>> {
        let cfg = self.manual_source(source_id);
        let receipt = ingest_batch(items, &cfg, &self.normalizer);
        let review = self.review.lock();
        Ok(receipt
            .documents
            .iter()
            .map(|d| review.gate.verify(d, &review.view, self.embedder.as_ref()))
            .collect())
    }

    /// Dry-run verification of a JSONL body.
    pub fn verify_jsonl(&self, source_id: &str, body: &str) -> Result<Vec<VerificationReport>> {
        let cfg = self.manual_source(source_id);
        let body = format!("{}\n", body.trim_end_matches('\n'));
        let out = parse_feed(&cfg, &body, &SourceCursor::default(), self.clock.now());
        self.verify_items(source_id, &out.items)
    }

    pub fn quarantine(&self) -> Vec<QuarantineRecord> {
        self.sources.lock().quarantine.clone()
    }

    pub fn open_tickets(&self) -> Vec<ConflictTicket> {
        self.review.lock().gate.tickets.open().cloned().collect()
    }

    pub fn resolve_ticket(
        &self,
        ticket_id: &str,
        resolution: Resolution,
        resolver: &str,
    ) -> Result<(ConflictTicket, ResolutionRecord)> {
        let _g = self.control.lock();
        let out = {
            let mut lake = self.lake.write();
            let mut review = self.review.lock();
            let Review { gate, view } = &mut *review;
            let out = gate.resolve_ticket(ticket_id, resolution, resolver, &mut lake, view, self.embedder.as_ref())?;
            self.index.sync(&lake)?;
            out
        };
        self.persist(true)?;
        Ok(out)
    }

    // ---- index

    /// Bring the index up to the lake; `full` rebuilds from scratch.
    pub fn reindex(&self, full: bool) -> Result<IndexEpoch> {
        let _g = self.control.lock();
        let epoch = {
            let lake = self.lake.read();
            if full {
                self.index.rebuild(&lake)
            } else {
                self.index.sync(&lake)?
            }
        };
        self.persist(true)?;
        Ok(epoch)
    }

    // ---- lake

    pub fn document(&self, doc_key: &str, version: Option<u32>, role: Option<&str>) -> Result<DocumentVersion> {
        Ok(self.lake.read().get(doc_key, version, role)?)
    }

    pub fn history(&self, doc_key: &str) -> Result<Vec<DocumentVersion>> {
        let h = self.lake.read().history(doc_key);
        if h.is_empty() {
            return Err(EngineError::NotFound(format!("document {doc_key}")));
        }
        Ok(h)
    }

    pub fn rollback(&self, doc_key: &str, version: u32) -> Result<DocumentVersion> {
        let _g = self.control.lock();
        let v = {
            let mut lake = self.lake.write();
            let v = lake.rollback(doc_key, version)?;
            let mut review = self.review.lock();
            let Review { gate, view } = &mut *review;
            view.sync_key(&lake, doc_key, self.embedder.as_ref());
            gate.after_lake_change(&lake);
            self.index.sync(&lake)?;
            v
        };
        self.persist(true)?;
        Ok(v)
    }

    pub fn export_live(&self, out: impl Write) -> Result<usize> {
        self.lake.read().export_live(out).map_err(|e| EngineError::Lake(e.into()))
    }

    pub fn integrity(&self) -> IntegrityReport {
        let lake = self.lake.read();
        let inputs = IntegrityInputs {
            chunks: self.index.snapshot().chunk_refs(),
            tickets: self.review.lock().gate.tickets.live_refs(),
        };
        lake.integrity_check(&inputs)
    }

    // ---- queries

    /// Answer a query through the deployment router. A shadow candidate runs
    /// on the same index snapshot with its response kept out of the reply.
    pub fn query(&self, q: &str, role: Option<&str>, query_id: Option<&str>) -> Result<FinalResponse> {
        let query_id = query_id.map(str::to_string).unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        let (serve, also) = {
            let r = self.rollout.lock();
            let live = r.registry.live().map(str::to_string);
            match r.deployment.as_ref().map(|d| rollout::route(&query_id, d)) {
                Some(Ok(a)) => (a.serve, a.also_run),
                _ => (live.unwrap_or_else(|| self.config.pipeline.version.clone()), None),
            }
        };
        let snap = self.index.snapshot();
        let opts = AnswerOptions {
            role: role.map(str::to_string),
            query_id: Some(query_id),
            served: Some(true),
        };
        let served = self.pipeline(&serve)?.answer_at(&snap, self.embedder.as_ref(), q, &opts)?;
        if let Some(c) = also {
            let shadow_opts = AnswerOptions {
                served: Some(false),
                ..opts
            };
            if let Err(e) = self.pipeline(&c)?.answer_at(&snap, self.embedder.as_ref(), q, &shadow_opts) {
                log::warn!("shadow candidate {c} failed: {e}");
            }
        }
        Ok(served)
    }

    pub fn trace(&self, trace_id: &str) -> Result<TraceTree> {
        self.tracer.flush();
        Ok(self.tracer.trace(trace_id)?)
    }

    pub fn lineage(&self, response_id: &str) -> Result<LineageGraph> {
        self.tracer.flush();
        let lake = self.lake.read();
        Ok(self.tracer.lineage(response_id, &lake)?)
    }

    pub fn responses(&self, window: Window) -> Vec<ResponseRecord> {
        self.tracer.flush();
        self.tracer.responses(window.0, window.1)
    }

    pub fn health(&self) -> Health {
        let epoch = self.index.epoch();
        let lake = self.lake.read();
        let r = self.rollout.lock();
        Health {
            pipeline_version: r.registry.live().map(str::to_string),
            index_epoch: epoch.epoch,
            lake_seq: lake.current_seq(),
            chunk_count: epoch.chunk_count,
            live_documents: lake.live_count(),
            open_tickets: self.review.lock().gate.tickets.open().count(),
            open_alerts: self.reports.alerts().iter().filter(|a| a.open).count(),
            deployment: r
                .deployment
                .as_ref()
                .filter(|d| d.status == DeploymentStatus::Active)
                .map(|d| d.deployment_id.clone()),
            dropped_trace_events: self.tracer.dropped(),
        }
    }

    // ---- offline evaluation

    /// Run a suite against `version` (default: the live one) and store the report.
    pub fn run_suite(&self, level: Level, cases: &[TestCase], seed: u64, version: Option<&str>) -> Result<MetricReport> {
        let version = match version {
            Some(v) => v.to_string(),
            None => self.live_version().ok_or_else(|| EngineError::Invalid("no live version".into()))?,
        };
        let p = self.pipeline(&version)?;
        let report = run_suite(level, cases, &p, &self.index, seed, SuiteParams::default());
        self.reports.put(&report.report_id, &report)?;
        Ok(report)
    }

    fn metric_report(&self, id: &str) -> Result<MetricReport> {
        let v = self
            .reports
            .get(id)
            .ok_or_else(|| EngineError::NotFound(format!("report {id}")))?;
        serde_json::from_value(v).map_err(|e| EngineError::Invalid(format!("{id} is not a metric report: {e}")))
    }

    /// Gate a stored report. A pass on a draft or recalled version moves it to
    /// offline_passed and closes its outstanding metric alerts.
    pub fn gate(&self, report_id: &str, baseline_id: Option<&str>) -> Result<GateOutcome> {
        let report = self.metric_report(report_id)?;
        let baseline = baseline_id.map(|b| self.metric_report(b)).transpose()?;
        let verdict = gate_release(&report, &self.config.gate.thresholds, baseline.as_ref(), self.config.gate.epsilon);
        let gate_id = format!("gate-{}", report_id.trim_start_matches("rep-"));
        self.reports.put(&gate_id, &verdict)?;
        let _g = self.control.lock();
        let version = report.pipeline_version.clone();
        let state = {
            let mut r = self.rollout.lock();
            let state = r.registry.state(&version)?;
            if verdict.pass && matches!(state, VersionState::Draft | VersionState::Recalled) {
                r.registry.mark_offline_passed(&version, report_id, self.clock.now())?;
                for a in self.reports.alerts() {
                    if a.open && a.kind == AlertKind::MetricBreach && a.pipeline_version.as_deref() == Some(&version) {
                        self.reports.close_alert(&a.alert_id)?;
                    }
                }
            }
            r.registry.state(&version)?
        };
        self.persist(false)?;
        Ok(GateOutcome { verdict, version, state })
    }

    // ---- coverage and live monitoring

    /// Compare served live traffic in `window` against the test set on the requested axes.
    pub fn coverage(&self, axes: &[Axis], cases: &[TestCase], window: Window) -> Result<CoverageOutcome> {
        let live: Vec<ResponseRecord> = self.responses(window).into_iter().filter(|r| r.served).collect();
        let live_queries: Vec<String> = live.iter().map(|r| r.query.clone()).collect();
        let test_queries: Vec<String> = cases.iter().map(|c| c.query.clone()).collect();
        let p = &self.config.coverage;
        let mut reports = Vec::new();
        let mut skipped = Vec::new();
        let axes: BTreeSet<Axis> = axes.iter().copied().collect();
        for axis in axes {
            let r = match axis {
                Axis::Query => query_coverage(
                    &live_queries,
                    &test_queries,
                    self.embedder.as_ref(),
                    p.tau_sim,
                    p.query_threshold,
                    p.report_lowest,
                    window,
                ),
                Axis::Retrieval => Ok(retrieval_coverage(&live, cases, p.retrieval_k, p.retrieval_threshold, window)),
                Axis::Generation => {
                    let answers: Vec<String> = live.iter().map(|r| r.answer.clone()).collect();
                    let refs: Vec<String> = cases.iter().filter_map(|c| c.reference_answer.clone()).collect();
                    generation_coverage(&answers, &refs, p.generation_threshold, window)
                }
                Axis::Vocabulary => Ok(vocabulary_coverage(
                    &live_queries,
                    &test_queries,
                    p.top_m,
                    p.vocabulary_threshold,
                    window,
                )),
            };
            match r {
                Ok(r) => {
                    self.reports.put(&r.report_id, &r)?;
                    reports.push(r);
                }
                Err(CoverageError::Config(m)) => skipped.push((axis, m)),
                Err(e) => return Err(e.into()),
            }
        }
        let alerts = self.reports.raise(&check_thresholds(&reports, &[]))?;
        Ok(CoverageOutcome { reports, skipped, alerts })
    }

    /// Live metrics per served version in `window`, checked against the live thresholds.
    pub fn live_check(&self, window: Window) -> Result<LiveCheck> {
        let live: Vec<ResponseRecord> = self.responses(window).into_iter().filter(|r| r.served).collect();
        let versions: BTreeSet<&str> = live.iter().map(|r| r.pipeline_version.as_str()).collect();
        let mut reports = Vec::new();
        for v in versions {
            let r = live_metric_report(&live, v, &self.config.live_thresholds, window);
            self.reports.put(&r.report_id, &r)?;
            reports.push(r);
        }
        let alerts = self.reports.raise(&check_thresholds(&[], &reports))?;
        Ok(LiveCheck { reports, alerts })
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.reports.alerts()
    }

    pub fn coverage_reports(&self) -> Vec<serde_json::Value> {
        self.reports.list("cov-")
    }

    // ---- deployment

    pub fn deploy_start(&self, req: &DeployRequest) -> Result<Deployment> {
        let _g = self.control.lock();
        let d = {
            let mut r = self.rollout.lock();
            if r.deployment.as_ref().is_some_and(|d| d.status == DeploymentStatus::Active) {
                return Err(RolloutError::Invalid("a deployment is already active".into()).into());
            }
            let control = r
                .registry
                .live()
                .map(str::to_string)
                .ok_or_else(|| EngineError::Invalid("no live version".into()))?;
            self.pipeline(&req.candidate)?;
            let d = rollout::start(
                &mut r.registry,
                req.strategy,
                &control,
                &req.candidate,
                req.ab_pct,
                req.schedule.clone(),
                self.clock.now(),
            )?;
            if let Some(old) = r.deployment.replace(d.clone()) {
                r.past.push(old);
            }
            d
        };
        self.persist(false)?;
        Ok(d)
    }

    fn with_active<T>(&self, f: impl FnOnce(&mut Rollout) -> Result<T>) -> Result<T> {
        let _g = self.control.lock();
        let out = {
            let mut r = self.rollout.lock();
            f(&mut r)?
        };
        self.persist(false)?;
        Ok(out)
    }

    /// Move a staged deployment forward once its stage window is complete
    /// (or unconditionally with `force`). Live metrics for the candidate's
    /// stage are checked first; a breach blocks the advance.
    pub fn deploy_advance(&self, force: bool) -> Result<Deployment> {
        let (candidate, since) = {
            let r = self.rollout.lock();
            let d = r.deployment.as_ref().ok_or(RolloutError::NotActive)?;
            (d.candidate.clone(), d.stage_started_at)
        };
        let now = self.clock.now();
        let seen = self
            .responses((Some(since), None))
            .iter()
            .filter(|r| r.served && r.pipeline_version == candidate)
            .count();
        if !force && !self.config.stage_window.complete(seen, since, now) {
            return Err(RolloutError::Blocked(format!(
                "stage window incomplete: {seen} of {} queries",
                self.config.stage_window.max_queries
            ))
            .into());
        }
        self.live_check((Some(since), Some(now)))?;
        let alerts = self.alerts();
        self.with_active(|r| {
            let d = r.deployment.as_mut().ok_or(RolloutError::NotActive)?;
            rollout::advance(&mut r.registry, d, &alerts, now)?;
            Ok(d.clone())
        })
    }

    pub fn deploy_promote(&self) -> Result<Deployment> {
        let alerts = self.alerts();
        let now = self.clock.now();
        self.with_active(|r| {
            let d = r.deployment.as_mut().ok_or(RolloutError::NotActive)?;
            rollout::promote_candidate(&mut r.registry, d, &alerts, now)?;
            Ok(d.clone())
        })
    }

    /// Recall the candidate; open alerts against it travel with the feedback record.
    pub fn deploy_recall(&self, reason: &str) -> Result<FeedbackRecord> {
        let alerts = self.alerts();
        let now = self.clock.now();
        self.with_active(|r| {
            let d = r.deployment.as_mut().ok_or(RolloutError::NotActive)?;
            let ids = alerts
                .iter()
                .filter(|a| a.open && a.pipeline_version.as_deref() == Some(&d.candidate))
                .map(|a| a.alert_id.clone())
                .collect();
            let fb = rollout::recall(&mut r.registry, d, reason, ids, now)?;
            r.feedback.push(fb.clone());
            Ok(fb)
        })
    }

    pub fn deploy_status(&self) -> RolloutStatus {
        let r = self.rollout.lock();
        RolloutStatus {
            live: r.registry.live().map(str::to_string),
            registry: r.registry.clone(),
            deployment: r.deployment.clone(),
            past_deployments: r.past.clone(),
            feedback: r.feedback.clone(),
        }
    }

    /// Compare control and candidate responses paired by query id over `window`.
    pub fn deploy_compare(&self, window: Window, top: usize) -> Result<ComparisonReport> {
        let (control, candidate) = {
            let r = self.rollout.lock();
            let d = r.deployment.as_ref().ok_or(RolloutError::NotActive)?;
            (d.control.clone(), d.candidate.clone())
        };
        let records = self.responses(window);
        let report = compare_shadow(&records, &control, &candidate, top)?;
        let id = format!(
            "cmp-{}",
            &sha256_hex(&serde_json::to_vec(&report).map_err(CoverageError::from)?)[..16]
        );
        self.reports.put(&id, &report)?;
        Ok(report)
    }
}
