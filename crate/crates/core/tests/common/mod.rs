//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use ragops_core::clock::StepClock;
use ragops_core::config::DeploymentConfig;
use ragops_core::engine::Engine;
use ragops_core::ingestion::{Operation, RawItem};
use ragops_core::pipeline::clients::LlmClient;
use serde::Deserialize;

// ---- ranking oracles

pub fn oracle_recall(retrieved: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut hit = 0;
    for r in relevant {
        if retrieved.iter().take(k).any(|x| x == r) {
            hit += 1;
        }
    }
    hit as f64 / relevant.len() as f64
}

pub fn oracle_precision(retrieved: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut hit = 0;
    for i in 0..k {
        if let Some(x) = retrieved.get(i) {
            if relevant.contains(x) {
                hit += 1;
            }
        }
    }
    hit as f64 / k as f64
}

pub fn oracle_rr(retrieved: &[String], relevant: &BTreeSet<String>) -> f64 {
    for (i, x) in retrieved.iter().enumerate() {
        if relevant.contains(x) {
            return 1.0 / (i as f64 + 1.0);
        }
    }
    0.0
}

// IDCG by exhaustive search over every ordering of the gains
// (bitmask DP: best[mask] = best DCG placing exactly the items in mask first).
pub fn oracle_ndcg(gains: &[f64], k: usize) -> f64 {
    let dcg: f64 = gains.iter().take(k).enumerate().map(|(i, x)| x / ((i + 2) as f64).log2()).sum();
    let n = gains.len();
    let mut best = vec![f64::NEG_INFINITY; 1 << n];
    best[0] = 0.0;
    for mask in 0..(1usize << n) {
        let pos = mask.count_ones() as usize;
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let add = if pos < k { gains[j] / ((pos + 2) as f64).log2() } else { 0.0 };
                let m = mask | (1 << j);
                best[m] = best[m].max(best[mask] + add);
            }
        }
    }
    let idcg = best[(1 << n) - 1];
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

// ---- BLEU/ROUGE reference fixture (tests/oracles/bleu_rouge.py)

#[derive(Deserialize)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Deserialize)]
pub struct Pair {
    pub candidate: String,
    pub references: Vec<String>,
    pub bleu: f64,
    pub rouge1: Rouge,
    pub rouge2: Rouge,
}

pub fn bleu_rouge_pairs() -> Vec<Pair> {
    serde_json::from_str(include_str!("../fixtures/bleu_rouge.json")).unwrap()
}

// ---- corpus helpers

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "zu", "re", "ta", "vo", "ni", "pe", "gu", "sa", "do", "fi", "ha", "jo", "be", "wu", "ce",
    "xi", "ry",
];

/// A synthetic word, unique per index below 8000 and never a stopword.
pub fn word(i: usize) -> String {
    let mut s = String::new();
    let mut n = i;
    for _ in 0..3 {
        s.push_str(SYLLABLES[n % 20]);
        n /= 20;
    }
    s
}

pub fn sentence(words: impl IntoIterator<Item = usize>) -> String {
    let w: Vec<String> = words.into_iter().map(word).collect();
    format!("{}.", w.join(" "))
}

pub fn ts(day: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::days(i64::from(day))
}

pub fn item(source: &str, id: &str, text: &str, day: u32) -> RawItem {
    RawItem::text(source, id, Operation::Add, text, ts(day)).with_meta("timestamp", ts(day).to_rfc3339())
}

pub fn step_clock() -> Arc<StepClock> {
    Arc::new(StepClock::starting_at_epoch(250))
}

pub fn engine_with(cfg: DeploymentConfig, llm: Option<Arc<dyn LlmClient>>) -> Engine {
    Engine::in_memory(cfg, step_clock(), llm).expect("engine")
}

pub fn engine() -> Engine {
    engine_with(DeploymentConfig::default(), None)
}

/// A config with a second pipeline version available as a rollout candidate.
pub fn config_with_candidate() -> DeploymentConfig {
    let mut cfg = DeploymentConfig::default();
    let mut cand = cfg.pipeline.clone();
    cand.version = "v2".into();
    cand.planner.vector_k = 12;
    cfg.candidates.push(cand);
    cfg
}

/// An LLM that ignores its context and states something unsupported.
pub struct HallucinatingLlm;

impl LlmClient for HallucinatingLlm {
    fn id(&self) -> &str {
        "planted-hallucination"
    }

    fn complete(&self, _prompt: &str, _max_tokens: usize) -> Result<String, ragops_core::pipeline::clients::LlmError> {
        Ok("Purple elephants negotiate lunar tariffs with enthusiastic accordion bankers.".into())
    }
}
