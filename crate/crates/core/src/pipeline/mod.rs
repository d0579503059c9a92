//! Query answering: enhance, plan, retrieve, rerank, build prompt, generate,
//! validate, with bounded reiteration and a span per stage.

pub mod clients;
pub mod stages;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{millis_between, Clock};
use crate::guardrails::{GuardrailConfig, Guardrails, RailContext, Stage};
use crate::observability::{PayloadRef, SpanStatus, TraceEvent, Tracer, Versions};
use crate::retrieval::index::{IndexSnapshot, RetrievalIndex};
use crate::text::sha256_hex;
use clients::{ApiClient, LlmClient, ABSTENTION};
pub use stages::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("input rejected: {0}")]
    RejectedInput(String),
    #[error("retrieval unavailable: {0}")]
    RetrievalUnavailable(String),
    #[error("generation unavailable: {0}")]
    GenerationUnavailable(String),
    #[error("generation returned empty text")]
    EmptyGeneration,
    #[error("pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: String,
    pub planner: PlannerConfig,
    pub rerank: RerankConfig,
    pub tau_ground: f64,
    pub max_iters: u32,
    /// Prompt size limit in whitespace tokens.
    pub context_window: usize,
    pub max_tokens: usize,
    pub template_id: String,
    pub templates: BTreeMap<String, PromptTemplate>,
    pub guardrails: GuardrailConfig,
    pub refusal: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            planner: PlannerConfig::default(),
            rerank: RerankConfig::default(),
            tau_ground: 0.6,
            max_iters: 2,
            context_window: 2048,
            max_tokens: 256,
            template_id: "default".into(),
            templates: [("default".to_string(), PromptTemplate::default())].into(),
            guardrails: GuardrailConfig::standard(),
            refusal: "I can't provide an answer to that from the available sources.".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<Vec<String>, PipelineError> {
        if self.version.trim().is_empty() {
            return Err(PipelineError::Config("version must be non-empty".into()));
        }
        if self.max_iters == 0 {
            return Err(PipelineError::Config("max_iters must be at least 1".into()));
        }
        if self.planner.vector_k == 0 || self.planner.keyword_k == 0 || self.planner.api_routes.iter().any(|r| r.k == 0) {
            return Err(PipelineError::Config("route k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_ground) || !(0.0..=1.0).contains(&self.rerank.mmr_lambda) {
            return Err(PipelineError::Config("tau_ground and mmr_lambda must lie in [0, 1]".into()));
        }
        for r in &self.planner.api_routes {
            Regex::new(&r.pattern).map_err(|e| PipelineError::Config(format!("api route {}: {e}", r.id)))?;
        }
        self.guardrails.validate().map_err(PipelineError::Config)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerOptions {
    pub role: Option<String>,
    /// Evaluation query id, recorded on the root span.
    pub query_id: Option<String>,
    /// False for shadow executions whose answer is not returned to the user.
    pub served: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub grounded: bool,
    pub relevance: f64,
    pub faithfulness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub response_id: String,
    pub answer: String,
    pub citations: Vec<String>,
    pub validation: ValidationSummary,
    pub iterations: u32,
    pub trace_id: String,
    pub pipeline_version: String,
    /// Routes that failed during retrieval.
    pub degraded: Vec<String>,
    /// Output rail that replaced the draft with a refusal.
    pub rejected_by: Option<String>,
    /// Chunk ids of the final retrieval ordered by fused score.
    pub retrieved: Vec<String>,
}

/// A configured pipeline version.
pub struct Pipeline {
    config: PipelineConfig,
    guardrails: Guardrails,
    api_patterns: Vec<(ApiRouteConfig, Regex)>,
    enhancer: Arc<dyn QueryEnhancer>,
    llm: Arc<dyn LlmClient>,
    api_clients: BTreeMap<String, Arc<dyn ApiClient>>,
    tracer: Tracer,
    clock: Arc<dyn Clock>,
}

struct Spans<'a> {
    trace_id: String,
    root_id: String,
    n: usize,
    versions: Versions,
    tracer: &'a Tracer,
    clock: &'a dyn Clock,
}

impl Spans<'_> {
    fn record(
        &mut self,
        component: &str,
        started: DateTime<Utc>,
        input: &str,
        output: &str,
        status: SpanStatus,
        attributes: BTreeMap<String, Value>,
    ) -> DateTime<Utc> {
        self.n += 1;
        let ended = self.clock.now();
        self.tracer.record(TraceEvent {
            trace_id: self.trace_id.clone(),
            span_id: format!("{}-s{}", self.trace_id, self.n),
            parent_span: Some(self.root_id.clone()),
            component: component.to_string(),
            operation: component.to_string(),
            started_at: started,
            ended_at: ended,
            input_digest: sha256_hex(input.as_bytes()),
            output_digest: sha256_hex(output.as_bytes()),
            payload_ref: None,
            versions: self.versions.clone(),
            status,
            attributes,
        });
        if component != "input_rails" && component != "output_rails" {
            self.tracer
                .record_metric(&format!("latency.{component}_ms"), millis_between(started, ended), ended);
        }
        ended
    }
}

fn attrs<const N: usize>(pairs: [(&str, Value); N]) -> BTreeMap<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        llm: Arc<dyn LlmClient>,
        tracer: Tracer,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let guardrails = Guardrails::from_config(&config.guardrails).map_err(PipelineError::Config)?;
        let api_patterns = config
            .planner
            .api_routes
            .iter()
            .map(|r| (r.clone(), Regex::new(&r.pattern).expect("validated")))
            .collect();
        Ok(Self {
            config,
            guardrails,
            api_patterns,
            enhancer: Arc::new(IdentityEnhancer),
            llm,
            api_clients: BTreeMap::new(),
            tracer,
            clock,
        })
    }

    pub fn with_api_client(mut self, client: Arc<dyn ApiClient>) -> Self {
        self.api_clients.insert(client.id().to_string(), client);
        self
    }

    pub fn with_enhancer(mut self, enhancer: Arc<dyn QueryEnhancer>) -> Self {
        self.enhancer = enhancer;
        self
    }

    pub fn guardrails_mut(&mut self) -> &mut Guardrails {
        &mut self.guardrails
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn version(&self) -> &str {
        &self.config.version
    }

    pub fn llm_id(&self) -> &str {
        self.llm.id()
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Retrieval only: input rails, enhance, plan, retrieve and fuse, returning
    /// chunk ids in fused order. Used for component-level evaluation.
    pub fn retrieve_ranked(
        &self,
        snap: &IndexSnapshot,
        embedder: &dyn crate::retrieval::embedding::Embedder,
        q: &str,
        role: Option<&str>,
    ) -> Result<Vec<String>, PipelineError> {
        let input = self.guardrails.apply_chain(
            Stage::Input,
            q,
            &RailContext {
                role,
                ..Default::default()
            },
        );
        let q = input
            .payload
            .ok_or_else(|| PipelineError::RejectedInput(input.rejection.and_then(|r| r.reason).unwrap_or_default()))?;
        let eq = enhance_query(&q, self.enhancer.as_ref(), embedder)?;
        let plan = plan(&eq, snap, &self.config.planner, &self.api_patterns, 1);
        let rs = retrieve(
            &plan,
            &eq,
            snap,
            role,
            &self.guardrails,
            &self.api_clients,
            &self.config.planner.api_routes,
            embedder,
        )?;
        let ctx = rerank(&rs, &self.config.rerank);
        let chunks = rs.chunk_ids();
        Ok(ctx.ranking.into_iter().filter(|id| chunks.contains(id)).collect())
    }

    /// Answer `q` against the index epoch current at call time.
    pub fn answer(&self, index: &RetrievalIndex, q: &str, opts: &AnswerOptions) -> Result<FinalResponse, PipelineError> {
        let snap = index.snapshot();
        self.answer_at(&snap, index.embedder().as_ref(), q, opts)
    }

    /// Answer `q` against a pinned snapshot.
    pub fn answer_at(
        &self,
        snap: &IndexSnapshot,
        embedder: &dyn crate::retrieval::embedding::Embedder,
        q: &str,
        opts: &AnswerOptions,
    ) -> Result<FinalResponse, PipelineError> {
        let cfg = &self.config;
        let role = opts.role.as_deref();
        let trace_id = format!("t-{}", uuid::Uuid::new_v4().simple());
        let response_id = format!("r-{}", uuid::Uuid::new_v4().simple());
        let versions = Versions {
            pipeline_version: cfg.version.clone(),
            index_epoch: snap.epoch.epoch,
            lake_seq: snap.epoch.lake_seq_covered,
            embedder_id: embedder.id().to_string(),
            llm_id: self.llm.id().to_string(),
        };
        let mut spans = Spans {
            root_id: format!("{trace_id}-s0"),
            trace_id: trace_id.clone(),
            n: 0,
            versions: versions.clone(),
            tracer: &self.tracer,
            clock: self.clock.as_ref(),
        };
        let t_root = self.clock.now();
        let result = self.run(snap, embedder, q, role, &mut spans);
        let t_end = self.clock.now();

        let (status, mut root_attrs, payload_ref, out) = match result {
            Ok(run) => {
                let resp = FinalResponse {
                    response_id: response_id.clone(),
                    answer: run.answer.clone(),
                    citations: run.citations.clone(),
                    validation: run.validation,
                    iterations: run.iterations,
                    trace_id: trace_id.clone(),
                    pipeline_version: cfg.version.clone(),
                    degraded: run.degraded.clone(),
                    rejected_by: run.rejected_by.clone(),
                    retrieved: run.retrieved.clone(),
                };
                let status = if run.rejected_by.is_some() {
                    SpanStatus::Rejected
                } else if !run.degraded.is_empty() {
                    SpanStatus::Degraded
                } else {
                    SpanStatus::Ok
                };
                let a = attrs([
                    ("response_id", json!(response_id)),
                    ("answer", json!(run.answer)),
                    ("citations", json!(run.citations)),
                    ("retrieved", json!(run.retrieved)),
                    ("faithfulness", json!(run.validation.faithfulness)),
                    ("relevance", json!(run.validation.relevance)),
                    ("grounded", json!(run.validation.grounded)),
                    ("iterations", json!(run.iterations)),
                    ("degraded", json!(run.degraded)),
                ]);
                self.tracer
                    .record_metric("answer.faithfulness", run.validation.faithfulness, t_end);
                self.tracer
                    .record_metric("answer.grounded", f64::from(u8::from(run.validation.grounded)), t_end);
                self.tracer.record_metric("answer.iterations", f64::from(run.iterations), t_end);
                self.tracer.record_metric("route.degraded", run.degraded.len() as f64, t_end);
                (status, a, run.prompt_ref, Ok(resp))
            }
            Err(e) => {
                let status = match e {
                    PipelineError::RejectedInput(_) => SpanStatus::Rejected,
                    _ => SpanStatus::Error,
                };
                (status, attrs([("error", json!(e.to_string()))]), None, Err(e))
            }
        };
        root_attrs.insert("query".into(), json!(q));
        if let Some(id) = &opts.query_id {
            root_attrs.insert("query_id".into(), json!(id));
        }
        root_attrs.insert("served".into(), json!(opts.served.unwrap_or(true)));
        let answer_text = out.as_ref().map(|r| r.answer.clone()).unwrap_or_default();
        self.tracer.record(TraceEvent {
            trace_id: trace_id.clone(),
            span_id: spans.root_id.clone(),
            parent_span: None,
            component: "answer".into(),
            operation: "answer".into(),
            started_at: t_root,
            ended_at: t_end,
            input_digest: sha256_hex(q.as_bytes()),
            output_digest: sha256_hex(answer_text.as_bytes()),
            payload_ref,
            versions,
            status,
            attributes: root_attrs,
        });
        self.tracer
            .record_metric("latency.answer_ms", millis_between(t_root, t_end), t_end);
        out
    }

    fn run(
        &self,
        snap: &IndexSnapshot,
        embedder: &dyn crate::retrieval::embedding::Embedder,
        q: &str,
        role: Option<&str>,
        spans: &mut Spans<'_>,
    ) -> Result<Run, PipelineError> {
        let cfg = &self.config;

        let t = self.clock.now();
        let input = self.guardrails.apply_chain(
            Stage::Input,
            q,
            &RailContext {
                role,
                ..Default::default()
            },
        );
        let status = if input.rejected() { SpanStatus::Rejected } else { SpanStatus::Ok };
        spans.record(
            "input_rails",
            t,
            q,
            input.payload.as_deref().unwrap_or(""),
            status,
            attrs([("rail_outcomes", json!(input.outcomes))]),
        );
        let q = match input.payload {
            Some(p) if !p.trim().is_empty() => p,
            Some(_) => return Err(PipelineError::RejectedInput("query is empty".into())),
            None => {
                return Err(PipelineError::RejectedInput(
                    input.reason().unwrap_or("rejected by input rail").to_string(),
                ))
            }
        };

        let t = self.clock.now();
        let eq = enhance_query(&q, self.enhancer.as_ref(), embedder)?;
        spans.record(
            "enhance",
            t,
            &q,
            &eq.enhanced,
            SpanStatus::Ok,
            attrs([("enhancer", json!(self.enhancer.id())), ("terms", json!(eq.terms))]),
        );

        let mut iterations = 0u32;
        let mut k_factor = 1usize;
        loop {
            iterations += 1;

            let t = self.clock.now();
            let plan = plan(&eq, snap, &cfg.planner, &self.api_patterns, k_factor);
            spans.record(
                "plan",
                t,
                &eq.enhanced,
                &plan.rationale,
                SpanStatus::Ok,
                attrs([
                    ("rationale", json!(plan.rationale)),
                    ("routes", json!(plan.routes)),
                    ("iteration", json!(iterations)),
                ]),
            );

            let t = self.clock.now();
            let rs = retrieve(
                &plan,
                &eq,
                snap,
                role,
                &self.guardrails,
                &self.api_clients,
                &cfg.planner.api_routes,
                embedder,
            );
            let rs = match rs {
                Ok(rs) => rs,
                Err(e) => {
                    spans.record(
                        "retrieve",
                        t,
                        &eq.enhanced,
                        "",
                        SpanStatus::Error,
                        attrs([("error", json!(e.to_string()))]),
                    );
                    return Err(e);
                }
            };
            let hit_ids: Vec<&str> = rs.items.iter().map(|i| i.id.as_str()).collect();
            spans.record(
                "retrieve",
                t,
                &eq.enhanced,
                &hit_ids.join("\n"),
                if rs.degraded.is_empty() { SpanStatus::Ok } else { SpanStatus::Degraded },
                attrs([
                    ("hits", json!(hit_ids)),
                    ("degraded", json!(rs.degraded)),
                    ("filtered", json!(rs.filtered)),
                    ("rail_outcomes", json!(rs.rail_outcomes)),
                ]),
            );

            let t = self.clock.now();
            let ctx = rerank(&rs, &cfg.rerank);
            let ids: Vec<&str> = ctx.items.iter().map(|i| i.id.as_str()).collect();
            spans.record(
                "rerank",
                t,
                &hit_ids.join("\n"),
                &ids.join("\n"),
                SpanStatus::Ok,
                attrs([("selected", json!(ids)), ("ranking", json!(ctx.ranking))]),
            );

            let t = self.clock.now();
            let mut prompt = build_prompt(&eq, &ctx, &cfg.template_id, &cfg.templates, cfg.context_window)?;
            let dialog = dialog_rails(&self.guardrails, &prompt.text, role);
            let dialog_rejected = dialog.rejected();
            if let Some(p) = &dialog.payload {
                prompt.text = p.clone();
            }
            let prompt_ref = self
                .tracer
                .put_payload(prompt.text.as_bytes())
                .map_err(|e| PipelineError::Config(format!("payload log: {e}")))?;
            let retained = prompt.context.chunk_ids();
            spans.record(
                "prompt",
                t,
                &ids.join("\n"),
                &prompt.text,
                if dialog_rejected { SpanStatus::Rejected } else { SpanStatus::Ok },
                attrs([
                    ("template_id", json!(prompt.template_id)),
                    ("retained", json!(retained)),
                    ("question_truncated", json!(prompt.question_truncated)),
                    ("payload", json!(prompt_ref)),
                    ("rail_outcomes", json!(dialog.outcomes)),
                ]),
            );
            if dialog_rejected {
                return Err(PipelineError::RejectedInput(
                    dialog.reason().unwrap_or("rejected by dialog rail").to_string(),
                ));
            }

            let t = self.clock.now();
            let draft = match generate(&prompt.text, self.llm.as_ref(), cfg.max_tokens) {
                Ok(d) => d,
                Err(e) => {
                    spans.record(
                        "generate",
                        t,
                        &prompt.text,
                        "",
                        SpanStatus::Error,
                        attrs([("error", json!(e.to_string()))]),
                    );
                    return Err(e);
                }
            };
            spans.record(
                "generate",
                t,
                &prompt.text,
                &draft,
                SpanStatus::Ok,
                attrs([("draft", json!(draft)), ("llm", json!(self.llm.id()))]),
            );

            let t = self.clock.now();
            let v = validate(&draft, &prompt.context, &eq, embedder, cfg.tau_ground);
            let reiterate = !v.grounded && iterations < cfg.max_iters;
            spans.record(
                "validate",
                t,
                &draft,
                &format!("{}", v.grounded),
                SpanStatus::Ok,
                attrs([
                    ("grounded", json!(v.grounded)),
                    ("faithfulness", json!(v.faithfulness)),
                    ("relevance", json!(v.relevance)),
                    ("reiterate", json!(reiterate)),
                ]),
            );
            if reiterate {
                k_factor *= 2;
                continue;
            }

            let t = self.clock.now();
            let texts = prompt.context.texts();
            let out = self.guardrails.apply_chain(
                Stage::Output,
                &draft,
                &RailContext {
                    role,
                    context: &texts,
                    abstention: draft.trim() == ABSTENTION,
                    ..Default::default()
                },
            );
            let rejected_by = out.rejection.as_ref().map(|r| r.rail_id.clone());
            let answer = out.payload.clone().unwrap_or_else(|| cfg.refusal.clone());
            spans.record(
                "output_rails",
                t,
                &draft,
                &answer,
                if rejected_by.is_some() { SpanStatus::Rejected } else { SpanStatus::Ok },
                attrs([("rail_outcomes", json!(out.outcomes))]),
            );

            let retrieved: Vec<String> = ctx
                .ranking
                .iter()
                .filter(|id| rs.items.iter().any(|i| i.is_chunk && &i.id == *id))
                .cloned()
                .collect();
            return Ok(Run {
                answer,
                citations: retained,
                retrieved,
                validation: ValidationSummary {
                    grounded: v.grounded,
                    relevance: v.relevance,
                    faithfulness: v.faithfulness,
                },
                iterations,
                degraded: rs.degraded.iter().map(|(r, _)| r.clone()).collect(),
                rejected_by,
                prompt_ref: Some(prompt_ref),
            });
        }
    }
}

struct Run {
    answer: String,
    citations: Vec<String>,
    retrieved: Vec<String>,
    validation: ValidationSummary,
    iterations: u32,
    degraded: Vec<String>,
    rejected_by: Option<String>,
    prompt_ref: Option<PayloadRef>,
}
