//! Ranked-retrieval and text-overlap metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::embedding::cosine;
use crate::text::{content_terms, split_sentences, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

fn top_k(retrieved: &[String], k: usize) -> BTreeSet<&str> {
    retrieved.iter().take(k).map(String::as_str).collect()
}

pub fn recall_at_k(retrieved: &[String], relevant: &BTreeSet<String>, k: usize) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::Undefined("recall with empty relevant set"));
    }
    if k == 0 {
        return Err(MetricError::Undefined("k must be at least 1"));
    }
    let hits = top_k(retrieved, k).iter().filter(|r| relevant.contains(**r)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

pub fn precision_at_k(retrieved: &[String], relevant: &BTreeSet<String>, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::Undefined("k must be at least 1"));
    }
    let hits = top_k(retrieved, k).iter().filter(|r| relevant.contains(**r)).count();
    Ok(hits as f64 / k as f64)
}

/// 1-based rank of the first relevant item.
pub fn first_relevant_rank(retrieved: &[String], relevant: &BTreeSet<String>) -> Option<usize> {
    retrieved.iter().position(|r| relevant.contains(r)).map(|i| i + 1)
}

pub fn mrr(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut rr: Vec<f64> = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).collect();
    rr.sort_by(f64::total_cmp);
    rr.iter().sum::<f64>() / ranks.len() as f64
}

fn dcg(gains: &[f64]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(gains: &[f64], k: usize) -> f64 {
    let actual = &gains[..k.min(gains.len())];
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    ideal.truncate(k);
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(actual) / idcg
    }
}

/// Binary gains of a ranked list against a relevant set.
pub fn binary_gains(retrieved: &[String], relevant: &BTreeSet<String>) -> Vec<f64> {
    retrieved.iter().map(|r| if relevant.contains(r) { 1.0 } else { 0.0 }).collect()
}

/// nDCG with binary relevance where the ideal ranking places every relevant item first.
pub fn ndcg_binary(retrieved: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let actual = binary_gains(&retrieved[..k.min(retrieved.len())], relevant);
    let ideal = vec![1.0; relevant.len().min(k)];
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(&actual) / idcg
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Default, PartialEq)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(candidate: &str, references: &[&str], max_n: usize) -> BleuStats {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut s = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        cand_len: cand.len(),
        ref_len: refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0),
    };
    for n in 1..=max_n {
        let c = ngrams(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, cnt) in ngrams(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(cnt);
            }
        }
        s.matches[n - 1] = c
            .iter()
            .map(|(g, cnt)| (*cnt).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        s.totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    s
}

fn bleu_from(s: &BleuStats, max_n: usize) -> f64 {
    if s.cand_len == 0 || max_n == 0 || s.matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if s.matches[n] > 0 {
            s.matches[n] as f64 / s.totals[n] as f64
        } else {
            1.0 / (s.totals[n].max(1) as f64 + 1.0)
        };
        log_sum += p.ln() / max_n as f64;
    }
    let bp = if s.cand_len > s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// BLEU of one candidate against one or more references. Clipped n-gram
/// precisions, closest-reference brevity penalty, and add-one smoothing
/// (`1 / (max(total, 1) + 1)`) for higher orders with no match. No unigram match scores 0.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    bleu_from(&bleu_stats(candidate, references, max_n), max_n)
}

/// Corpus BLEU: statistics summed over all pairs before combining.
pub fn corpus_bleu(pairs: &[(&str, Vec<&str>)], max_n: usize) -> f64 {
    let mut total = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    for (c, refs) in pairs {
        let s = bleu_stats(c, refs, max_n);
        for n in 0..max_n {
            total.matches[n] += s.matches[n];
            total.totals[n] += s.totals[n];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    bleu_from(&total, max_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let (cg, rg) = (ngrams(&c, n), ngrams(&r, n));
    let ct: usize = cg.values().sum();
    let rt: usize = rg.values().sum();
    if ct == 0 || rt == 0 {
        return RougeScore {
            recall: 0.0,
            precision: 0.0,
            f1: 0.0,
        };
    }
    let overlap: usize = cg
        .iter()
        .map(|(g, k)| (*k).min(rg.get(g).copied().unwrap_or(0)))
        .sum();
    let recall = overlap as f64 / rt as f64;
    let precision = overlap as f64 / ct as f64;
    let f1 = if overlap == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { recall, precision, f1 }
}

static CITATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[[^\]\n]*\]").unwrap());

/// Remove inline `[...]` citation markers.
pub fn strip_citations(text: &str) -> String {
    CITATION.replace_all(text, " ").into_owned()
}

/// Per-sentence support of an answer by its context: `(sentence, best recall)`.
/// Sentences with no content terms are omitted.
pub fn sentence_support(answer: &str, context: &[String]) -> Vec<(String, f64)> {
    let items: Vec<BTreeSet<String>> = context
        .iter()
        .map(|c| content_terms(c).into_iter().collect())
        .collect();
    split_sentences(&strip_citations(answer))
        .into_iter()
        .filter_map(|s| {
            let terms: BTreeSet<String> = content_terms(&s).into_iter().collect();
            if terms.is_empty() {
                return None;
            }
            let best = items
                .iter()
                .map(|it| terms.iter().filter(|t| it.contains(*t)).count() as f64 / terms.len() as f64)
                .fold(0.0, f64::max);
            Some((s, best))
        })
        .collect()
}

pub const SUPPORT_THRESHOLD: f64 = 0.5;

/// Fraction of answer sentences whose content-term recall against some single
/// context item is at least 0.5.
pub fn faithfulness(answer: &str, context: &[String]) -> f64 {
    let support = sentence_support(answer, context);
    if support.is_empty() {
        return 0.0;
    }
    let ok = support.iter().filter(|(_, r)| *r >= SUPPORT_THRESHOLD).count();
    ok as f64 / support.len() as f64
}

pub fn hallucination_rate(answer: &str, context: &[String]) -> f64 {
    1.0 - faithfulness(answer, context)
}

/// `1 − cos(a, b)`; zero when the vectors are identical.
pub fn embedding_drift(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        0.0
    } else {
        1.0 - cosine(a, b)
    }
}

/// Order-independent mean: values are sorted before summation.
pub fn stable_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Term frequency table of a text collection (content terms only).
pub fn term_counts<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in texts {
        for term in content_terms(t) {
            *m.entry(term).or_default() += 1;
        }
    }
    m
}
