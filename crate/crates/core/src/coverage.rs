//! How well offline test sets represent live traffic: query, retrieval,
//! generation and vocabulary coverage, plus threshold alerts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::evaluation::{lower_is_better, stable_mean, TestCase};
use crate::observability::{stats, ResponseRecord};
use crate::retrieval::chunking::parse_chunk_id;
use crate::retrieval::embedding::Embedder;
use crate::text::{content_terms, sha256_hex};

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("coverage config: {0}")]
    Config(String),
    #[error("report store: {0}")]
    Io(#[from] std::io::Error),
    #[error("report store: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Query,
    Retrieval,
    Generation,
    Vocabulary,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Query, Axis::Retrieval, Axis::Generation, Axis::Vocabulary];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Query => "query",
            Self::Retrieval => "retrieval",
            Self::Generation => "generation",
            Self::Vocabulary => "vocabulary",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown axis {s:?}"))
    }
}

pub type Window = (Option<DateTime<Utc>>, Option<DateTime<Utc>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub report_id: String,
    pub axis: Axis,
    pub window: Window,
    /// `None` when the live window is empty.
    pub score: Option<f64>,
    pub threshold: f64,
    pub breach: bool,
    pub details: Value,
}

fn report_id(prefix: &str, body: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(body).expect("report serializes");
    format!("{prefix}-{}", &sha256_hex(&bytes)[..16])
}

impl CoverageReport {
    fn new(axis: Axis, window: Window, score: Option<f64>, threshold: f64, details: Value) -> Self {
        let mut r = Self {
            report_id: String::new(),
            axis,
            window,
            score,
            threshold,
            breach: score.is_some_and(|s| s < threshold),
            details,
        };
        r.report_id = report_id("cov", &r);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoveragePolicy {
    pub tau_sim: f64,
    pub query_threshold: f64,
    pub retrieval_threshold: f64,
    pub generation_threshold: f64,
    pub vocabulary_threshold: f64,
    pub retrieval_k: usize,
    pub top_m: usize,
    /// How many lowest-similarity live queries to report.
    pub report_lowest: usize,
}

impl Default for CoveragePolicy {
    fn default() -> Self {
        Self {
            tau_sim: 0.7,
            query_threshold: 0.85,
            retrieval_threshold: 0.85,
            generation_threshold: 0.85,
            vocabulary_threshold: 0.85,
            retrieval_k: 5,
            top_m: 50,
            report_lowest: 10,
        }
    }
}

impl CoveragePolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (n, v) in [
            ("tau_sim", self.tau_sim),
            ("query_threshold", self.query_threshold),
            ("retrieval_threshold", self.retrieval_threshold),
            ("generation_threshold", self.generation_threshold),
            ("vocabulary_threshold", self.vocabulary_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("coverage {n} must lie in [0, 1], got {v}"));
            }
        }
        if self.retrieval_k == 0 {
            return Err("coverage retrieval_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Fraction of live queries whose best cosine to any test query is at least `tau_sim`.
pub fn query_coverage(
    live: &[String],
    test: &[String],
    embedder: &dyn Embedder,
    tau_sim: f64,
    threshold: f64,
    report_lowest: usize,
    window: Window,
) -> Result<CoverageReport, CoverageError> {
    let test_emb: Vec<_> = test.iter().filter_map(|t| embedder.embed(t).ok()).collect();
    if test_emb.is_empty() {
        return Err(CoverageError::Config("query coverage needs a non-empty test set".into()));
    }
    if live.is_empty() {
        return Ok(CoverageReport::new(Axis::Query, window, None, threshold, json!({"live_queries": 0})));
    }
    let mut best: Vec<(f64, &str)> = live
        .iter()
        .map(|q| {
            let s = embedder
                .embed(q)
                .map(|e| test_emb.iter().map(|t| e.cosine(t)).fold(f64::NEG_INFINITY, f64::max))
                .unwrap_or(0.0);
            (s, q.as_str())
        })
        .collect();
    let covered = best.iter().filter(|(s, _)| *s >= tau_sim).count();
    let score = covered as f64 / live.len() as f64;
    best.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let lowest: Vec<Value> = best
        .iter()
        .take(report_lowest)
        .map(|(s, q)| json!({"query": q, "max_similarity": s}))
        .collect();
    Ok(CoverageReport::new(
        Axis::Query,
        window,
        Some(score),
        threshold,
        json!({"live_queries": live.len(), "covered": covered, "tau_sim": tau_sim, "lowest_similarity": lowest}),
    ))
}

/// Document keys referenced by a test set.
pub fn test_documents(cases: &[TestCase]) -> BTreeSet<String> {
    let mut docs: BTreeSet<String> = cases.iter().flat_map(|c| c.relevant_doc_keys.iter().cloned()).collect();
    docs.extend(
        cases
            .iter()
            .flat_map(|c| c.relevant_chunks.iter())
            .filter_map(|c| parse_chunk_id(c).map(|(d, _, _)| d.to_string())),
    );
    docs
}

fn doc_of(chunk: &str) -> String {
    parse_chunk_id(chunk).map_or_else(|| chunk.to_string(), |(d, _, _)| d.to_string())
}

/// Fraction of live queries whose top-k retrieved documents touch the test set's documents.
pub fn retrieval_coverage(
    live: &[ResponseRecord],
    cases: &[TestCase],
    k: usize,
    threshold: f64,
    window: Window,
) -> CoverageReport {
    let covered_docs = test_documents(cases);
    if live.is_empty() {
        return CoverageReport::new(Axis::Retrieval, window, None, threshold, json!({"live_queries": 0}));
    }
    let mut hit = 0;
    let mut outside = BTreeSet::new();
    for r in live {
        let docs: Vec<String> = r.retrieved.iter().take(k).map(|c| doc_of(c)).collect();
        if docs.iter().any(|d| covered_docs.contains(d)) {
            hit += 1;
        }
        outside.extend(docs.into_iter().filter(|d| !covered_docs.contains(d)));
    }
    let score = hit as f64 / live.len() as f64;
    CoverageReport::new(
        Axis::Retrieval,
        window,
        Some(score),
        threshold,
        json!({"live_queries": live.len(), "covered": hit, "k": k, "out_of_scope_documents": outside}),
    )
}

fn distribution<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for t in texts {
        for term in content_terms(t) {
            *counts.entry(term).or_default() += 1.0;
        }
    }
    let total: f64 = counts.values().sum();
    counts.values_mut().for_each(|v| *v /= total);
    counts
}

/// Jensen-Shannon divergence in bits (range [0, 1]).
pub fn js_divergence(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let vocab: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let mut js = 0.0;
    for t in vocab {
        let a = p.get(t).copied().unwrap_or(0.0);
        let b = q.get(t).copied().unwrap_or(0.0);
        let m = (a + b) / 2.0;
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    js.clamp(0.0, 1.0)
}

/// `1 − JS(live answer terms, test reference answer terms)`.
pub fn generation_coverage(
    live_answers: &[String],
    test_answers: &[String],
    threshold: f64,
    window: Window,
) -> Result<CoverageReport, CoverageError> {
    let p = distribution(live_answers.iter().map(String::as_str));
    let q = distribution(test_answers.iter().map(String::as_str));
    if p.is_empty() || q.is_empty() {
        return Err(CoverageError::Config(
            "generation coverage needs live answers and test reference answers with content terms".into(),
        ));
    }
    let js = js_divergence(&p, &q);
    Ok(CoverageReport::new(
        Axis::Generation,
        window,
        Some(1.0 - js),
        threshold,
        json!({"js_divergence": js, "live_vocabulary": p.len(), "test_vocabulary": q.len()}),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewTerm {
    pub term: String,
    pub tf_idf: f64,
    pub count: usize,
}

/// Live terms absent from the test vocabulary, ranked by TF-IDF over the live
/// texts; score is one minus their share of live term occurrences.
pub fn vocabulary_coverage(
    live: &[String],
    test: &[String],
    top_m: usize,
    threshold: f64,
    window: Window,
) -> CoverageReport {
    let test_vocab: BTreeSet<String> = test.iter().flat_map(|t| content_terms(t)).collect();
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for t in live {
        let terms = content_terms(t);
        for term in &terms {
            *tf.entry(term.clone()).or_default() += 1;
        }
        for term in terms.into_iter().collect::<BTreeSet<_>>() {
            *df.entry(term).or_default() += 1;
        }
    }
    let total: usize = tf.values().sum();
    if total == 0 {
        return CoverageReport::new(Axis::Vocabulary, window, None, threshold, json!({"new_terms": []}));
    }
    let n = live.len() as f64;
    let mut new: Vec<NewTerm> = tf
        .iter()
        .filter(|(t, _)| !test_vocab.contains(*t))
        .map(|(t, &c)| NewTerm {
            term: t.clone(),
            tf_idf: c as f64 * (((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0),
            count: c,
        })
        .collect();
    new.sort_by(|a, b| b.tf_idf.total_cmp(&a.tf_idf).then_with(|| a.term.cmp(&b.term)));
    new.truncate(top_m);
    let share = new.iter().map(|t| t.count).sum::<usize>() as f64 / total as f64;
    CoverageReport::new(
        Axis::Vocabulary,
        window,
        Some(1.0 - share),
        threshold,
        json!({"new_terms": new, "live_terms": total}),
    )
}

/// Live quality of one pipeline version over a window, checked against thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMetricReport {
    pub report_id: String,
    pub pipeline_version: String,
    pub window: Window,
    pub n_responses: usize,
    pub metrics: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub breaches: Vec<String>,
}

/// Summary metrics of the responses served by `version`.
pub fn live_metrics(responses: &[ResponseRecord], version: &str) -> BTreeMap<String, f64> {
    let mine: Vec<&ResponseRecord> = responses.iter().filter(|r| r.pipeline_version == version).collect();
    let mut m = BTreeMap::new();
    if mine.is_empty() {
        return m;
    }
    let lat: Vec<f64> = mine.iter().map(|r| r.latency_ms).collect();
    let s = stats(&lat);
    if let Some(p) = s.p95 {
        m.insert("latency.answer_ms.p95".into(), p);
    }
    let faith: Vec<f64> = mine.iter().filter_map(|r| r.faithfulness).collect();
    if let Some(f) = stable_mean(&faith) {
        m.insert("faithfulness".into(), f);
        m.insert("hallucination_rate".into(), 1.0 - f);
    }
    let grounded: Vec<f64> = mine.iter().map(|r| if r.grounded { 1.0 } else { 0.0 }).collect();
    m.insert("grounded_rate".into(), stable_mean(&grounded).unwrap_or(0.0));
    m
}

pub fn live_metric_report(
    responses: &[ResponseRecord],
    version: &str,
    thresholds: &BTreeMap<String, f64>,
    window: Window,
) -> LiveMetricReport {
    let metrics = live_metrics(responses, version);
    let breaches = thresholds
        .iter()
        .filter(|(name, &t)| match metrics.get(*name) {
            Some(&v) if lower_is_better(name) => v > t,
            Some(&v) => v < t,
            None => false,
        })
        .map(|(n, _)| n.clone())
        .collect();
    let mut r = LiveMetricReport {
        report_id: String::new(),
        pipeline_version: version.to_string(),
        window,
        n_responses: responses.iter().filter(|r| r.pipeline_version == version).count(),
        metrics,
        thresholds: thresholds.clone(),
        breaches,
    };
    r.report_id = report_id("live", &r);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    CoverageBreach,
    MetricBreach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionHint {
    ExpandTestSet,
    InvestigatePipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub kind: AlertKind,
    /// Id of the persisted report that breached.
    pub evidence: String,
    pub action_hint: ActionHint,
    /// Version sent back to offline testing (metric breaches only).
    pub pipeline_version: Option<String>,
    pub summary: String,
    pub open: bool,
}

/// One alert per breached report.
pub fn check_thresholds(coverage: &[CoverageReport], live: &[LiveMetricReport]) -> Vec<Alert> {
    let mut out = Vec::new();
    for r in coverage.iter().filter(|r| r.breach) {
        out.push(Alert {
            alert_id: format!("alr-{}", &sha256_hex(format!("coverage|{}", r.report_id).as_bytes())[..16]),
            kind: AlertKind::CoverageBreach,
            evidence: r.report_id.clone(),
            action_hint: ActionHint::ExpandTestSet,
            pipeline_version: None,
            summary: format!(
                "{} coverage {:.3} below {:.3}",
                r.axis,
                r.score.unwrap_or(0.0),
                r.threshold
            ),
            open: true,
        });
    }
    for r in live.iter().filter(|r| !r.breaches.is_empty()) {
        out.push(Alert {
            alert_id: format!("alr-{}", &sha256_hex(format!("metric|{}", r.report_id).as_bytes())[..16]),
            kind: AlertKind::MetricBreach,
            evidence: r.report_id.clone(),
            action_hint: ActionHint::InvestigatePipeline,
            pipeline_version: Some(r.pipeline_version.clone()),
            summary: format!("{} breached {}", r.pipeline_version, r.breaches.join(", ")),
            open: true,
        });
    }
    out
}

/// Persisted reports and alerts: one JSON file per report under `reports/`,
/// alerts in `alerts.json`. In-memory when no directory is given.
pub struct ReportStore {
    dir: Option<PathBuf>,
    inner: Mutex<StoreState>,
}

#[derive(Default, Serialize, Deserialize)]
struct StoreState {
    reports: BTreeMap<String, Value>,
    alerts: Vec<Alert>,
}

impl ReportStore {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(StoreState::default()),
        }
    }

    pub fn open(dir: &Path) -> Result<Self, CoverageError> {
        std::fs::create_dir_all(dir.join("reports"))?;
        let mut st = StoreState::default();
        for e in std::fs::read_dir(dir.join("reports"))? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "json") {
                let id = p.file_stem().unwrap().to_string_lossy().into_owned();
                st.reports.insert(id, serde_json::from_slice(&std::fs::read(&p)?)?);
            }
        }
        let ap = dir.join("alerts.json");
        if ap.exists() {
            st.alerts = serde_json::from_slice(&std::fs::read(ap)?)?;
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            inner: Mutex::new(st),
        })
    }

    pub fn put(&self, id: &str, report: &impl Serialize) -> Result<(), CoverageError> {
        let v = serde_json::to_value(report)?;
        if let Some(d) = &self.dir {
            std::fs::write(d.join("reports").join(format!("{id}.json")), serde_json::to_vec_pretty(&v)?)?;
        }
        self.inner.lock().reports.insert(id.to_string(), v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Value> {
        self.inner.lock().reports.get(id).cloned()
    }

    pub fn list(&self, prefix: &str) -> Vec<Value> {
        self.inner
            .lock()
            .reports
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Add alerts whose evidence is already stored; new ids only.
    pub fn raise(&self, alerts: &[Alert]) -> Result<Vec<Alert>, CoverageError> {
        let mut st = self.inner.lock();
        let mut added = Vec::new();
        for a in alerts {
            if !st.reports.contains_key(&a.evidence) {
                return Err(CoverageError::Config(format!(
                    "alert {} references unknown report {}",
                    a.alert_id, a.evidence
                )));
            }
            if !st.alerts.iter().any(|x| x.alert_id == a.alert_id) {
                st.alerts.push(a.clone());
                added.push(a.clone());
            }
        }
        self.save_alerts(&st)?;
        Ok(added)
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.inner.lock().alerts.clone()
    }

    pub fn close_alert(&self, id: &str) -> Result<bool, CoverageError> {
        let mut st = self.inner.lock();
        let found = st.alerts.iter_mut().find(|a| a.alert_id == id).map(|a| a.open = false).is_some();
        self.save_alerts(&st)?;
        Ok(found)
    }

    fn save_alerts(&self, st: &StoreState) -> Result<(), CoverageError> {
        if let Some(d) = &self.dir {
            std::fs::write(d.join("alerts.json"), serde_json::to_vec_pretty(&st.alerts)?)?;
        }
        Ok(())
    }
}
