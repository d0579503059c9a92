#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ragops_core::clock::StepClock;
use ragops_core::config::DeploymentConfig;
use ragops_core::engine::Engine;
use ragops_core::pipeline::clients::LlmClient;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const DOCS: &[(&str, &str)] = &[
    ("refunds.txt", "Refunds are processed within fourteen days of the return request."),
    ("shipping.txt", "Shipping to Canada takes five business days by standard post."),
    ("warranty.txt", "The warranty covers manufacturing defects for two years after purchase."),
];

/// A fixture directory: `docs/` with plain-text files, a JSONL feed with one
/// legal-only document, and a small test suite.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("docs");
        std::fs::create_dir(&docs).unwrap();
        for (name, text) in DOCS {
            std::fs::write(docs.join(name), text).unwrap();
        }
        let feed = [
            json!({"external_id": "policy", "payload": "Contract disputes go to the legal team for review within ten days.", "metadata": {"acl": ["legal"], "timestamp": "2026-01-05T00:00:00Z"}}),
            json!({"external_id": "hours", "payload": "The support desk is open from nine to five on weekdays.", "metadata": {"timestamp": "2026-01-05T00:00:00Z"}}),
        ];
        std::fs::write(dir.path().join("feed.jsonl"), lines(&feed)).unwrap();
        let suite = [
            json!({"case_id": "refund", "query": "how long do refunds take", "relevant_doc_keys": ["docs:refunds.txt"], "reference_answer": DOCS[0].1}),
            json!({"case_id": "ship", "query": "shipping time to Canada", "relevant_doc_keys": ["docs:shipping.txt"], "reference_answer": DOCS[1].1}),
            json!({"case_id": "warranty", "query": "what does the warranty cover", "relevant_doc_keys": ["docs:warranty.txt"], "reference_answer": DOCS[2].1}),
        ];
        std::fs::write(dir.path().join("suite.jsonl"), lines(&suite)).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// A config file rooting lake, traces and state inside the fixture.
    pub fn write_config(&self) -> PathBuf {
        let mut cfg = config();
        cfg.paths.lake_dir = "lake".into();
        cfg.paths.trace_dir = "traces".into();
        cfg.paths.state_dir = "state".into();
        let path = self.path("ragops.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        path
    }
}

fn lines(v: &[Value]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

/// Default config plus a `v2` candidate.
pub fn config() -> DeploymentConfig {
    let mut cfg = DeploymentConfig::default();
    let mut cand = cfg.pipeline.clone();
    cand.version = "v2".into();
    cand.planner.vector_k = 12;
    cfg.candidates.push(cand);
    cfg
}

pub fn engine_with(cfg: DeploymentConfig, llm: Option<Arc<dyn LlmClient>>) -> Arc<Engine> {
    Arc::new(Engine::in_memory(cfg, Arc::new(StepClock::starting_at_epoch(250)), llm).unwrap())
}

pub fn engine() -> Arc<Engine> {
    engine_with(config(), None)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<String>, role: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = role {
        req = req.header(ragops::http::ROLE_HEADER, r);
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

