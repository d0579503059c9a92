//! Offline test suites at module, component and end-to-end level, and release gating.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::*;
use crate::clock::millis_between;
use crate::observability::stats;
use crate::pipeline::{AnswerOptions, Pipeline};
use crate::retrieval::chunking::parse_chunk_id;
use crate::retrieval::index::RetrievalIndex;
use crate::text::sha256_hex;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("test case {0}: {1}")]
    InvalidCase(String, String),
    #[error("test set line {0}: {1}")]
    Parse(usize, String),
    #[error("test set: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub relevant_chunks: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub relevant_doc_keys: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

impl TestCase {
    pub fn validate(&self) -> Result<(), SuiteError> {
        if self.case_id.trim().is_empty() {
            return Err(SuiteError::InvalidCase(self.case_id.clone(), "empty case_id".into()));
        }
        if self.relevant_chunks.is_empty() && self.relevant_doc_keys.is_empty() && self.reference_answer.is_none() {
            return Err(SuiteError::InvalidCase(
                self.case_id.clone(),
                "needs a relevant set or a reference answer".into(),
            ));
        }
        Ok(())
    }

    fn has_relevance(&self) -> bool {
        !self.relevant_chunks.is_empty() || !self.relevant_doc_keys.is_empty()
    }
}

/// Read test cases from JSON lines; blank lines are skipped.
pub fn load_cases(reader: impl BufRead) -> Result<Vec<TestCase>, SuiteError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: TestCase = serde_json::from_str(&line).map_err(|e| SuiteError::Parse(i + 1, e.to_string()))?;
        c.validate()?;
        if !ids.insert(c.case_id.clone()) {
            return Err(SuiteError::InvalidCase(c.case_id, "duplicate case_id".into()));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn load_cases_file(path: &Path) -> Result<Vec<TestCase>, SuiteError> {
    load_cases(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Deserialize)]
struct BeirQuery {
    #[serde(rename = "_id")]
    id: String,
    text: String,
}

/// Import a BEIR-style benchmark: `queries.jsonl` (`{_id, text}`) plus a qrels
/// TSV (`query-id  corpus-id  score`, optional header). Corpus ids map to
/// document keys; qrels with score ≤ 0 are ignored.
pub fn import_beir(queries: impl BufRead, qrels: impl BufRead) -> Result<Vec<TestCase>, SuiteError> {
    let mut rel: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in qrels.lines().enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 3 || (i == 0 && cols[0] == "query-id") {
            continue;
        }
        let score: f64 = cols[2].parse().map_err(|_| SuiteError::Parse(i + 1, format!("bad score {:?}", cols[2])))?;
        if score > 0.0 {
            rel.entry(cols[0].to_string()).or_default().insert(cols[1].to_string());
        }
    }
    let mut out = Vec::new();
    for (i, line) in queries.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: BeirQuery = serde_json::from_str(&line).map_err(|e| SuiteError::Parse(i + 1, e.to_string()))?;
        if let Some(docs) = rel.remove(&q.id) {
            out.push(TestCase {
                case_id: q.id,
                query: q.text,
                relevant_doc_keys: docs,
                tags: vec!["beir".into()],
                ..Default::default()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Module,
    Component,
    EndToEnd,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Module => "module",
            Self::Component => "component",
            Self::EndToEnd => "end_to_end",
        })
    }
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "module" => Ok(Self::Module),
            "component" => Ok(Self::Component),
            "e2e" | "end_to_end" | "end-to-end" => Ok(Self::EndToEnd),
            _ => Err(format!("unknown level {s:?}; expected module, component or e2e")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Digest of the report content excluding `created_at`.
    pub report_id: String,
    pub level: Level,
    pub metrics: BTreeMap<String, f64>,
    pub n_cases: usize,
    pub seed: u64,
    pub pipeline_version: String,
    pub index_epoch: u64,
    /// Cases skipped because their ids did not resolve, with the reason.
    pub unresolved: Vec<(String, String)>,
    pub created_at: DateTime<Utc>,
}

impl MetricReport {
    fn seal(mut self) -> Self {
        let mut body = self.clone();
        body.report_id = String::new();
        body.created_at = DateTime::<Utc>::UNIX_EPOCH;
        let bytes = serde_json::to_vec(&body).expect("report serializes");
        self.report_id = format!("rep-{}", &sha256_hex(&bytes)[..16]);
        self
    }
}

/// Cut-offs used by the component and end-to-end levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub k: usize,
    pub ndcg_k: usize,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self { k: 5, ndcg_k: 10 }
    }
}

fn insert_stats(m: &mut BTreeMap<String, f64>, name: &str, values: &[f64]) {
    if values.is_empty() {
        return;
    }
    let s = stats(values);
    m.insert(format!("{name}.mean"), stable_mean(values).unwrap_or(0.0));
    if let Some(p) = s.p50 {
        m.insert(format!("{name}.p50"), p);
    }
    if let Some(p) = s.p95 {
        m.insert(format!("{name}.p95"), p);
    }
}

fn mean_into(m: &mut BTreeMap<String, f64>, name: &str, values: &[f64]) {
    if let Some(v) = stable_mean(values) {
        m.insert(name.to_string(), v);
    }
}

/// Map ranked chunk ids onto the identifiers a case's relevant set uses.
fn ranked_for(case: &TestCase, chunk_ids: &[String]) -> (Vec<String>, BTreeSet<String>) {
    if !case.relevant_chunks.is_empty() {
        return (chunk_ids.to_vec(), case.relevant_chunks.clone());
    }
    let mut seen = BTreeSet::new();
    let docs = chunk_ids
        .iter()
        .filter_map(|c| parse_chunk_id(c).map(|(d, _, _)| d.to_string()))
        .filter(|d| seen.insert(d.clone()))
        .collect();
    (docs, case.relevant_doc_keys.clone())
}

/// Relevance ids that are not present in the pinned snapshot.
fn unresolved_ids(case: &TestCase, index: &RetrievalIndex) -> Vec<String> {
    let snap = index.snapshot();
    let mut missing: Vec<String> = case
        .relevant_chunks
        .iter()
        .filter(|c| snap.chunk(c).is_none())
        .cloned()
        .collect();
    missing.extend(
        case.relevant_doc_keys
            .iter()
            .filter(|d| snap.doc_version(d).is_none())
            .cloned(),
    );
    missing
}

/// Run a suite at `level`. Cases are executed in an order shuffled by `seed`;
/// aggregation is order-independent, so the report depends only on the cases,
/// corpus snapshot, pipeline config and seed (plus latency under a real clock).
pub fn run_suite(
    level: Level,
    cases: &[TestCase],
    pipeline: &Pipeline,
    index: &RetrievalIndex,
    seed: u64,
    params: SuiteParams,
) -> MetricReport {
    let snap = index.snapshot();
    let embedder = index.embedder().clone();
    let clock = pipeline.clock().clone();
    let mut order: Vec<&TestCase> = cases.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut metrics = BTreeMap::new();
    let mut unresolved = Vec::new();
    let mut n = 0;
    match level {
        Level::Module => {
            let mut self_sim = Vec::new();
            let mut latency = Vec::new();
            for c in &order {
                let t0 = clock.now();
                let a = embedder.embed(&c.query);
                let t1 = clock.now();
                let b = embedder.embed(&c.query);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        n += 1;
                        self_sim.push(a.cosine(&b));
                        latency.push(millis_between(t0, t1));
                    }
                    _ => unresolved.push((c.case_id.clone(), "query has no tokens to embed".into())),
                }
            }
            mean_into(&mut metrics, "embedding.self_similarity", &self_sim);
            insert_stats(&mut metrics, "latency.embed_ms", &latency);
            if n > 0 {
                let drift = snap.epoch.drift.unwrap_or(0.0);
                metrics.insert("embedding.drift".into(), drift);
            }
        }
        Level::Component => {
            let (mut rec, mut prec, mut rr, mut nd, mut latency) = (vec![], vec![], vec![], vec![], vec![]);
            for c in &order {
                if !c.has_relevance() {
                    unresolved.push((c.case_id.clone(), "no relevant set".into()));
                    continue;
                }
                let missing = unresolved_ids(c, index);
                if !missing.is_empty() {
                    unresolved.push((c.case_id.clone(), format!("unknown ids {missing:?}")));
                    continue;
                }
                let t0 = clock.now();
                let ranked = pipeline.retrieve_ranked(&snap, embedder.as_ref(), &c.query, c.role.as_deref());
                let t1 = clock.now();
                let ranked = match ranked {
                    Ok(r) => r,
                    Err(e) => {
                        unresolved.push((c.case_id.clone(), e.to_string()));
                        continue;
                    }
                };
                n += 1;
                let (ids, rel) = ranked_for(c, &ranked);
                rec.push(recall_at_k(&ids, &rel, params.k).unwrap_or(0.0));
                prec.push(precision_at_k(&ids, &rel, params.k).unwrap_or(0.0));
                rr.push(first_relevant_rank(&ids, &rel).map_or(0.0, |r| 1.0 / r as f64));
                nd.push(ndcg_binary(&ids, &rel, params.ndcg_k));
                latency.push(millis_between(t0, t1));
            }
            mean_into(&mut metrics, &format!("recall@{}", params.k), &rec);
            mean_into(&mut metrics, &format!("precision@{}", params.k), &prec);
            mean_into(&mut metrics, "mrr", &rr);
            mean_into(&mut metrics, &format!("ndcg@{}", params.ndcg_k), &nd);
            insert_stats(&mut metrics, "latency.retrieve_ms", &latency);
        }
        Level::EndToEnd => {
            let (mut faith, mut grounded, mut bleus, mut r1, mut r2, mut rec, mut latency) =
                (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
            for c in &order {
                let missing = unresolved_ids(c, index);
                if !missing.is_empty() {
                    unresolved.push((c.case_id.clone(), format!("unknown ids {missing:?}")));
                    continue;
                }
                let opts = AnswerOptions {
                    role: c.role.clone(),
                    query_id: Some(c.case_id.clone()),
                    served: Some(false),
                };
                let t0 = clock.now();
                let resp = pipeline.answer_at(&snap, embedder.as_ref(), &c.query, &opts);
                let t1 = clock.now();
                let resp = match resp {
                    Ok(r) => r,
                    Err(e) => {
                        unresolved.push((c.case_id.clone(), e.to_string()));
                        continue;
                    }
                };
                n += 1;
                latency.push(millis_between(t0, t1));
                faith.push(resp.validation.faithfulness);
                grounded.push(if resp.validation.grounded { 1.0 } else { 0.0 });
                if let Some(reference) = &c.reference_answer {
                    let answer = strip_citations(&resp.answer);
                    bleus.push(bleu(&answer, &[reference], 4));
                    r1.push(rouge_n(&answer, reference, 1).f1);
                    r2.push(rouge_n(&answer, reference, 2).f1);
                }
                if c.has_relevance() {
                    let (ids, rel) = ranked_for(c, &resp.retrieved);
                    rec.push(recall_at_k(&ids, &rel, params.k).unwrap_or(0.0));
                }
            }
            mean_into(&mut metrics, "faithfulness", &faith);
            if let Some(f) = stable_mean(&faith) {
                metrics.insert("hallucination_rate".into(), 1.0 - f);
            }
            mean_into(&mut metrics, "grounded_rate", &grounded);
            mean_into(&mut metrics, "bleu", &bleus);
            mean_into(&mut metrics, "rouge1_f1", &r1);
            mean_into(&mut metrics, "rouge2_f1", &r2);
            mean_into(&mut metrics, &format!("recall@{}", params.k), &rec);
            insert_stats(&mut metrics, "latency.answer_ms", &latency);
        }
    }
    metrics.retain(|_, v| v.is_finite());
    unresolved.sort();
    MetricReport {
        report_id: String::new(),
        level,
        metrics,
        n_cases: n,
        seed,
        pipeline_version: pipeline.version().to_string(),
        index_epoch: snap.epoch.epoch,
        unresolved,
        created_at: clock.now(),
    }
    .seal()
}

/// Whether a larger value of `metric` is worse.
pub fn lower_is_better(metric: &str) -> bool {
    metric.starts_with("latency.") || metric.starts_with("hallucination") || metric.starts_with("embedding.drift")
}

pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFailure {
    pub metric: String,
    pub value: Option<f64>,
    pub threshold: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteVerdict {
    pub pass: bool,
    pub failures: Vec<GateFailure>,
    pub baseline_ref: Option<String>,
    pub report_id: String,
}

/// Gate a report on absolute thresholds (≥ passes; ≤ for lower-is-better
/// metrics) and on regression beyond `epsilon` against an optional baseline.
pub fn gate_release(
    report: &MetricReport,
    thresholds: &BTreeMap<String, f64>,
    baseline: Option<&MetricReport>,
    epsilon: f64,
) -> SuiteVerdict {
    let mut failures = Vec::new();
    for (metric, &threshold) in thresholds {
        let value = report.metrics.get(metric).copied();
        let lower = lower_is_better(metric);
        match value {
            None => failures.push(GateFailure {
                metric: metric.clone(),
                value: None,
                threshold,
                reason: "metric missing from report".into(),
            }),
            Some(v) if (!lower && v < threshold) || (lower && v > threshold) => failures.push(GateFailure {
                metric: metric.clone(),
                value: Some(v),
                threshold,
                reason: if lower { "above maximum" } else { "below threshold" }.into(),
            }),
            _ => {}
        }
    }
    if let Some(b) = baseline {
        for (metric, &base) in &b.metrics {
            let Some(&v) = report.metrics.get(metric) else { continue };
            // latency regressions are judged by thresholds only; they are not comparable across clocks
            if metric.starts_with("latency.") {
                continue;
            }
            let regress = if lower_is_better(metric) { v - base } else { base - v };
            if regress > epsilon {
                failures.push(GateFailure {
                    metric: metric.clone(),
                    value: Some(v),
                    threshold: base,
                    reason: format!("regressed {regress:.4} vs baseline {}", b.report_id),
                });
            }
        }
    }
    SuiteVerdict {
        pass: failures.is_empty(),
        failures,
        baseline_ref: baseline.map(|b| b.report_id.clone()),
        report_id: report.report_id.clone(),
    }
}
