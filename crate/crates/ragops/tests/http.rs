mod common;

use std::sync::Arc;

use common::*;
use ragops::http::router;
use ragops_core::guardrails::{RailKind, RailSpec, Stage};
use ragops_core::pipeline::clients::{LlmClient, LlmError, ABSTENTION};
use serde_json::json;

async fn ingest_fixture(app: &axum::Router) {
    let fx = Fixture::new();
    let body = std::fs::read_to_string(fx.path("feed.jsonl")).unwrap();
    let (s, v) = call(app, "POST", "/ingest?source_id=kb", Some(body), None).await;
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["decisions"]["accept"], 2);
}

#[tokio::test]
async fn health_on_fresh_boot_reports_versions() {
    let app = router(engine());
    let (s, v) = call(&app, "GET", "/health", None, None).await;
    assert_eq!(s, 200);
    assert_eq!(v["pipeline_version"], "v1");
    assert!(v["index_epoch"].is_u64());
    assert_eq!(v["lake_seq"], 0);
}

#[tokio::test]
async fn empty_corpus_abstains() {
    let app = router(engine());
    let (s, v) = call(&app, "POST", "/query", Some(json!({"query": "what is the refund window"}).to_string()), None).await;
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["answer"], ABSTENTION);
    assert_eq!(v["citations"], json!([]));
}

#[tokio::test]
async fn roles_see_only_permitted_chunks() {
    let app = router(engine());
    ingest_fixture(&app).await;
    let q = json!({"query": "contract disputes legal team"}).to_string();

    let (s, legal) = call(&app, "POST", "/query", Some(q.clone()), Some("legal")).await;
    assert_eq!(s, 200);
    let cites: Vec<&str> = legal["citations"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert!(cites.iter().any(|c| c.starts_with("kb:policy#")), "{legal}");

    for role in [None, Some("sales")] {
        let (s, v) = call(&app, "POST", "/query", Some(q.clone()), role).await;
        assert_eq!(s, 200);
        for c in v["citations"].as_array().unwrap() {
            assert!(!c.as_str().unwrap().starts_with("kb:policy#"), "{role:?} cited {c}");
        }
        for c in v["retrieved"].as_array().unwrap() {
            assert!(!c.as_str().unwrap().starts_with("kb:policy#"), "{role:?} retrieved {c}");
        }
        assert!(!v["answer"].as_str().unwrap().contains("Contract disputes"));
    }
    // the body role wins over the header
    let (_, v) = call(&app, "POST", "/query", Some(json!({"query": "contract disputes legal team", "role": "legal"}).to_string()), Some("sales")).await;
    assert_eq!(v["citations"], legal["citations"]);
}

#[tokio::test]
async fn error_kinds_map_to_status_codes() {
    let mut cfg = config();
    cfg.pipeline.guardrails.rails.push(RailSpec {
        rail_id: "no-drops".into(),
        stage: Stage::Input,
        order: 5,
        kind: RailKind::Blocklist { terms: vec!["dropdb".into()] },
    });
    let app = router(engine_with(cfg, None));
    ingest_fixture(&app).await;
    let ops = |v: serde_json::Value| Some(v.to_string());

    let cases = [
        ("POST", "/query", Some("{not json".to_string()), 400),
        ("POST", "/query", ops(json!({"role": "legal"})), 400),
        ("POST", "/ops", ops(json!({"op": "no_such_op"})), 400),
        ("POST", "/ops", ops(json!({"op": "lake_get", "doc_key": "kb:policy", "role": "sales"})), 403),
        ("POST", "/ops", ops(json!({"op": "lake_get", "doc_key": "kb:policy"})), 403),
        ("POST", "/ops", ops(json!({"op": "lake_get", "doc_key": "kb:policy", "role": "legal"})), 200),
        ("GET", "/trace/t-0000", None, 404),
        ("GET", "/lineage/r-0000", None, 404),
        ("GET", "/nowhere", None, 404),
        ("POST", "/query", ops(json!({"query": "please dropdb now"})), 422),
        ("POST", "/ops", ops(json!({"op": "deploy_advance"})), 409),
        ("POST", "/ops", ops(json!({"op": "review_resolve", "ticket_id": "tk-x", "resolution": "keep_a"})), 404),
        ("POST", "/ops", ops(json!({"op": "lake_rollback", "doc_key": "kb:hours", "version": 9})), 404),
        ("POST", "/ops", ops(json!({"op": "lake_rollback", "doc_key": "kb:hours", "version": 1})), 400),
    ];
    for (method, uri, body, want) in cases {
        let (s, v) = call(&app, method, uri, body.clone(), None).await;
        assert_eq!(s.as_u16(), want, "{method} {uri} {body:?}: {v}");
        if want != 200 {
            assert!(v["error"].is_string(), "{v}");
        }
    }
}

struct DownLlm;

impl LlmClient for DownLlm {
    fn id(&self) -> &str {
        "down"
    }

    fn complete(&self, _: &str, _: usize) -> Result<String, LlmError> {
        Err(LlmError::Transport("connection refused".into()))
    }
}

#[tokio::test]
async fn generation_outage_is_503() {
    let app = router(engine_with(config(), Some(Arc::new(DownLlm))));
    ingest_fixture(&app).await;
    let (s, v) = call(&app, "POST", "/query", Some(json!({"query": "support desk hours"}).to_string()), None).await;
    assert_eq!(s, 503, "{v}");
    assert_eq!(v["kind"], "unavailable");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_queries_match_sequential_answers() {
    let e = engine();
    let app = router(e.clone());
    ingest_fixture(&app).await;
    let queries: Vec<String> = (0..24)
        .map(|i| ["support desk hours", "contract disputes", "weekday opening time"][i % 3].to_string())
        .collect();
    let mut handles = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let app = app.clone();
        let body = json!({"query": q, "query_id": format!("c{i}")}).to_string();
        handles.push(tokio::spawn(async move { call(&app, "POST", "/query", Some(body), None).await }));
    }
    for (h, q) in handles.into_iter().zip(&queries) {
        let (s, v) = h.await.unwrap();
        assert_eq!(s, 200);
        let alone = e.query(q, None, None).unwrap();
        assert_eq!(v["answer"], alone.answer);
        assert_eq!(v["citations"], json!(alone.citations));
    }
}
