mod common;

use std::process::{Command, Output};

use common::*;
use serde_json::Value;

fn ragops(fx: &Fixture, args: &[&str]) -> Output {
    let cfg = fx.write_config();
    Command::new(env!("CARGO_BIN_EXE_ragops"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

fn json_out(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let fx = Fixture::new();
    for args in [
        &["--no-such-flag"][..],
        &["frobnicate"],
        &["test", "--level", "sideways", "--suite", "s.jsonl"],
        &["test", "--level", "e2e"],
        &["deploy", "ab", "--candidate", "v2", "--pct", "300"],
        &["review", "resolve", "tk-1", "--keep", "c"],
        &["test", "--level", "e2e", "--suite", "/definitely/missing.jsonl"],
    ] {
        let o = ragops(&fx, args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{args:?}");
    }
    // an explicitly named config that does not exist
    let o = Command::new(env!("CARGO_BIN_EXE_ragops"))
        .args(["--config", "/definitely/missing.toml", "health"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_ragops")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn ingest_round_trip_grows_the_lake() {
    let fx = Fixture::new();
    let before = json_out(&ragops(&fx, &["--json", "health"]));
    assert_eq!(before["lake_seq"], 0);

    let o = ragops(&fx, &["--json", "ingest", "--source", &fx.arg("docs")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["receipt"]["total"], DOCS.len());
    assert_eq!(v["decisions"]["accept"], DOCS.len());

    // state persists across invocations
    let after = json_out(&ragops(&fx, &["--json", "health"]));
    assert_eq!(after["lake_seq"], DOCS.len());
    assert_eq!(after["live_documents"], DOCS.len());
    let exported = ragops(&fx, &["lake", "export"]);
    let lines: Vec<Value> = String::from_utf8_lossy(&exported.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut texts: Vec<&str> = lines.iter().map(|l| l["text"].as_str().unwrap()).collect();
    texts.sort();
    let mut want: Vec<&str> = DOCS.iter().map(|d| d.1).collect();
    want.sort();
    assert_eq!(texts, want);

    // polling again from the cursor finds nothing new
    let again = json_out(&ragops(&fx, &["--json", "ingest", "--source", &fx.arg("docs")]));
    assert_eq!(again["receipt"]["total"], 0);
    assert_eq!(again["lake_seq"], DOCS.len());
}

#[test]
fn test_suite_prints_a_metric_report() {
    let fx = Fixture::new();
    assert_eq!(code(&ragops(&fx, &["ingest", "--source", &fx.arg("docs")])), 0);
    let run = |seed: &str| ragops(&fx, &["test", "--level", "e2e", "--suite", &fx.arg("suite.jsonl"), "--seed", seed, "--json"]);
    let o = run("7");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["level"], "end_to_end");
    assert_eq!(v["seed"], 7);
    assert_eq!(v["n_cases"], 3);
    assert_eq!(v["pipeline_version"], "v1");
    let metrics = v["metrics"].as_object().unwrap();
    assert!(!metrics.is_empty());
    for (k, m) in metrics.iter().filter(|(k, _)| !k.starts_with("latency.")) {
        assert!(m.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x)), "{k} = {m}");
    }
    // wall-clock latencies vary between runs; quality metrics do not
    let again = json_out(&run("7"));
    let quality = |v: &Value| {
        v["metrics"].as_object().unwrap().iter().filter(|(k, _)| !k.starts_with("latency.")).map(|(k, m)| (k.clone(), m.clone())).collect::<Vec<_>>()
    };
    assert_eq!(quality(&again), quality(&v));
    // the report can be gated by id afterwards
    let g = ragops(&fx, &["--json", "test", "--report", v["report_id"].as_str().unwrap()]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    assert_eq!(json_out(&g)["version"], "v1");
}

#[test]
fn operation_failures_exit_1() {
    let fx = Fixture::new();
    for args in [
        &["lake", "get", "docs:nothing"][..],
        &["trace", "t-missing"],
        &["deploy", "advance"],
        &["ingest", "--source", "/definitely/not/here"],
        &["review", "resolve", "tk-1", "--keep", "a"],
    ] {
        let o = ragops(&fx, args);
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    let o = ragops(&fx, &["--json", "lake", "get", "docs:nothing"]);
    assert_eq!(code(&o), 1);
    assert_eq!(json_out(&o)["kind"], "not_found");
}

#[test]
fn query_and_lineage_from_the_command_line() {
    let fx = Fixture::new();
    assert_eq!(code(&ragops(&fx, &["ingest", "--source", &fx.arg("docs")])), 0);
    let v = json_out(&ragops(&fx, &["--json", "query", "how long do refunds take"]));
    assert!(v["answer"].as_str().unwrap().contains("fourteen days"), "{v}");
    let rid = v["response_id"].as_str().unwrap();
    let g = json_out(&ragops(&fx, &["--json", "lineage", rid]));
    assert_eq!(g["response_id"], rid);
    assert_eq!(g["chunk_ids"], v["citations"]);
    assert_eq!(g["unresolved"], serde_json::json!([]));
    let t = ragops(&fx, &["--json", "trace", v["trace_id"].as_str().unwrap()]);
    assert_eq!(code(&t), 0);
    let plain = String::from_utf8_lossy(&ragops(&fx, &["query", "how long do refunds take"]).stdout).into_owned();
    assert!(plain.contains("citations: docs:refunds.txt#v1#c0"), "{plain}");
}
