//! Every operation is reachable from both the CLI and HTTP, and both give the
//! same result. One scripted session runs twice on twin engines: once as
//! parsed CLI commands, once as JSON posted to `/ops`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use common::*;
use ragops::cli::{parse, Action};
use ragops::http::{router, status_for, ROUTES};
use ragops::ops::{execute, Command};
use ragops_core::engine::Engine;
use regex::Regex;
use serde_json::Value;

// ids minted per run (response, trace, span, query) differ between engines
fn normalize(v: &Value) -> Value {
    let ids = Regex::new(r"\b[rts]-[0-9a-f]{32}\b|\b[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}\b").unwrap();
    match v {
        Value::String(s) => Value::String(ids.replace_all(s, "<id>").into_owned()),
        Value::Array(a) => Value::Array(a.iter().map(normalize).collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (ids.replace_all(k, "<id>").into_owned(), normalize(v))).collect()),
        v => v.clone(),
    }
}

struct Side {
    engine: Arc<Engine>,
    vars: BTreeMap<&'static str, String>,
}

impl Side {
    fn argv(&self, template: &[&str]) -> Vec<String> {
        let mut out = vec!["ragops".to_string()];
        for t in template {
            let mut s = t.to_string();
            for (k, v) in &self.vars {
                s = s.replace(&format!("{{{k}}}"), v);
            }
            out.push(s);
        }
        out
    }

    fn learn(&mut self, out: &Value) {
        for (var, key) in [("trace", "trace_id"), ("response", "response_id")] {
            if let Some(s) = out[key].as_str() {
                self.vars.insert(var, s.to_string());
            }
        }
        if let Some(s) = out["report"]["report_id"].as_str().or(out["report_id"].as_str()) {
            self.vars.insert("report", s.to_string());
        }
    }
}

fn command(argv: &[String]) -> Command {
    match parse(argv).unwrap_or_else(|e| panic!("{argv:?}: {e}")).1 {
        Action::Run(c) => c,
        a => panic!("{argv:?} parsed to {a:?}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn every_operation_has_cli_and_http_forms_with_equal_results() {
    let fx = Fixture::new();
    let (docs, feed, suite) = (fx.arg("docs"), fx.arg("feed.jsonl"), fx.arg("suite.jsonl"));
    let script: Vec<Vec<&str>> = vec![
        vec!["ingest", "--source", &docs],
        vec!["ingest", "--feed", &feed, "--source-id", "kb"],
        vec!["verify", "--source-id", "kb", &feed],
        vec!["review", "list"],
        vec!["review", "resolve", "tk-missing", "--keep", "a"],
        vec!["reindex", "--full"],
        vec!["reindex"],
        vec!["query", "how long do refunds take", "--query-id", "q1"],
        vec!["query", "contract disputes", "--role", "legal", "--query-id", "q2"],
        vec!["health"],
        vec!["trace", "{trace}"],
        vec!["lineage", "{response}"],
        vec!["trace", "t-missing"],
        vec!["test", "--level", "e2e", "--suite", &suite, "--seed", "7"],
        vec!["test", "--report", "{report}"],
        vec!["test", "--level", "component", "--suite", &suite, "--pipeline", "v2", "--gate"],
        vec!["coverage", "--suite", &suite, "--axis", "query", "--axis", "vocabulary"],
        vec!["coverage", "--list"],
        vec!["coverage", "--live"],
        vec!["coverage", "--alerts"],
        vec!["deploy", "shadow", "--candidate", "v2"],
        vec!["deploy", "status"],
        vec!["query", "what does the warranty cover", "--query-id", "q3"],
        vec!["deploy", "compare", "--top", "3"],
        vec!["deploy", "advance"],
        vec!["deploy", "promote"],
        vec!["deploy", "recall", "--reason", "parity check"],
        vec!["deploy", "status"],
        vec!["lake", "history", "kb:policy"],
        vec!["lake", "get", "kb:policy", "--role", "legal"],
        vec!["lake", "get", "kb:policy", "--role", "sales"],
        vec!["ingest", "--feed", &feed, "--source-id", "kb"],
        vec!["lake", "rollback", "docs:refunds.txt", "1"],
        vec!["lake", "export"],
        vec!["lake", "integrity"],
    ];

    let mut cli = Side { engine: engine(), vars: BTreeMap::new() };
    let mut http = Side { engine: engine(), vars: BTreeMap::new() };
    let app = router(http.engine.clone());
    let mut covered = BTreeSet::new();
    let mut failures = 0;

    for step in &script {
        let a = command(&cli.argv(step));
        let b = command(&http.argv(step));
        covered.insert(a.name());
        let body = serde_json::to_string(&b).unwrap();
        // the wire form round-trips to the same command
        assert_eq!(serde_json::from_str::<Command>(&body).unwrap(), b);

        let direct = execute(&cli.engine, a);
        let (status, posted) = call(&app, "POST", "/ops", Some(body), None).await;
        match direct {
            Ok(out) => {
                assert_eq!(status, 200, "{step:?}: {posted}");
                assert_eq!(normalize(&out), normalize(&posted), "{step:?}");
                cli.learn(&out);
                http.learn(&posted);
            }
            Err(e) => {
                failures += 1;
                assert_eq!(status, status_for(e.kind()), "{step:?}: {e} vs {posted}");
                assert_eq!(posted["error"].as_str(), Some(e.to_string().as_str()));
            }
        }
    }
    // some steps are meant to fail (missing ids, denied roles)
    assert!(failures >= 3 && failures < script.len() / 3, "{failures} failures");

    let all: BTreeSet<String> = Command::NAMES.iter().map(|s| s.to_string()).collect();
    assert_eq!(covered, all, "every operation appears in the script");

    // the fixed routes run the same commands as /ops
    for (_, _, op) in ROUTES {
        assert!(all.contains(*op), "{op}");
    }
    let ops = |cmd: Command| call(&app, "POST", "/ops", Some(serde_json::to_string(&cmd).unwrap()), None);
    let trace = http.vars["trace"].clone();
    let response = http.vars["response"].clone();
    let pairs = [
        ("GET", "/health".to_string(), None, Command::Health),
        ("GET", "/reports/coverage".to_string(), None, Command::CoverageReports),
        ("GET", format!("/trace/{trace}"), None, Command::Trace { trace_id: trace.clone() }),
        ("GET", format!("/lineage/{response}"), None, Command::Lineage { response_id: response.clone() }),
    ];
    for (method, uri, body, cmd) in pairs {
        let (s1, v1) = call(&app, method, &uri, body, None).await;
        let (s2, v2) = ops(cmd).await;
        assert_eq!((s1, &v1), (s2, &v2), "{uri}");
    }
    let (s, v) = call(&app, "POST", "/query", Some(r#"{"query": "shipping time to Canada", "query_id": "q9"}"#.into()), None).await;
    let (_, w) = ops(Command::Query {
        query: "shipping time to Canada".into(),
        role: None,
        query_id: Some("q9".into()),
    })
    .await;
    assert_eq!(s, 200);
    assert_eq!(normalize(&v)["answer"], normalize(&w)["answer"]);
    assert_eq!(v["citations"], w["citations"]);

    let body = std::fs::read_to_string(fx.path("feed.jsonl")).unwrap();
    let (s, v) = call(&app, "POST", "/ingest?source_id=kb", Some(body.clone()), None).await;
    let (_, w) = ops(Command::IngestJsonl { source_id: "kb".into(), body }).await;
    assert_eq!(s, 200);
    assert_eq!(v["decisions"], w["decisions"]);
}
