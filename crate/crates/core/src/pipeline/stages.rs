//! The individual query-processing stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::clients::{fetch_with_timeout, ApiClient, LlmClient, LlmError};
use super::PipelineError;
use crate::evaluation::{faithfulness, strip_citations};
use crate::guardrails::{ChainOutcome, Guardrails, RailContext, RailOutcome, Stage};
use crate::retrieval::embedding::{Embedder, Embedding};
use crate::retrieval::index::IndexSnapshot;
use crate::text::{content_terms, count_tokens, tokenize};

/// Rewrites a query before retrieval.
pub trait QueryEnhancer: Send + Sync {
    fn id(&self) -> &str;
    fn enhance(&self, query: &str) -> String;
}

#[derive(Debug, Clone, Default)]
pub struct IdentityEnhancer;

impl QueryEnhancer for IdentityEnhancer {
    fn id(&self) -> &str {
        "identity"
    }

    fn enhance(&self, query: &str) -> String {
        query.trim().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedQuery {
    pub original: String,
    pub enhanced: String,
    pub embedder_id: String,
    pub query_embedding: Embedding,
    /// Content terms of the enhanced query, stopwords removed.
    pub terms: Vec<String>,
}

pub fn enhance_query(
    q: &str,
    enhancer: &dyn QueryEnhancer,
    embedder: &dyn Embedder,
) -> Result<EnhancedQuery, PipelineError> {
    let enhanced = enhancer.enhance(q);
    if enhanced.trim().is_empty() {
        return Err(PipelineError::RejectedInput("query is empty".into()));
    }
    let query_embedding = embedder
        .embed(&enhanced)
        .map_err(|_| PipelineError::RejectedInput("query has no word tokens".into()))?;
    let mut seen = BTreeSet::new();
    let terms = content_terms(&enhanced)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect();
    Ok(EnhancedQuery {
        original: q.to_string(),
        enhanced,
        embedder_id: embedder.id().to_string(),
        query_embedding,
        terms,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouteSource {
    Vector,
    Keyword,
    Api(String),
}

impl fmt::Display for RouteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Vector => f.write_str("vector"),
            Self::Keyword => f.write_str("keyword"),
            Self::Api(id) => write!(f, "api:{id}"),
        }
    }
}

impl Serialize for RouteSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RouteSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "vector" => Self::Vector,
            "keyword" => Self::Keyword,
            other => match other.strip_prefix("api:") {
                Some(id) if !id.is_empty() => Self::Api(id.to_string()),
                _ => return Err(serde::de::Error::custom(format!("unknown route source {s:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub source: RouteSource,
    pub method: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    pub routes: Vec<Route>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRouteConfig {
    pub id: String,
    /// Regex matched against the enhanced query.
    pub pattern: String,
    #[serde(default = "default_api_k")]
    pub k: usize,
    #[serde(default = "default_api_timeout")]
    pub timeout_ms: u64,
}

fn default_api_k() -> usize {
    5
}

fn default_api_timeout() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub vector_k: usize,
    pub keyword_k: usize,
    /// A query term is rare when it occurs in at least one and fewer than this many chunks.
    pub df_rare: usize,
    pub api_routes: Vec<ApiRouteConfig>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            vector_k: 10,
            keyword_k: 10,
            df_rare: 3,
            api_routes: Vec::new(),
        }
    }
}

/// Rule-based planner: vector always; keyword when a rare term is present;
/// API routes whose pattern matches.
pub fn plan(
    eq: &EnhancedQuery,
    snap: &IndexSnapshot,
    cfg: &PlannerConfig,
    api_patterns: &[(ApiRouteConfig, Regex)],
    k_factor: usize,
) -> RetrievalPlan {
    let mut routes = vec![Route {
        source: RouteSource::Vector,
        method: "cosine".into(),
        k: cfg.vector_k * k_factor,
    }];
    let mut why = vec![format!("vector(k={})", cfg.vector_k * k_factor)];
    let rare: Vec<&str> = eq
        .terms
        .iter()
        .filter(|t| {
            let df = snap.doc_freq(t);
            df > 0 && df < cfg.df_rare
        })
        .map(String::as_str)
        .collect();
    if !rare.is_empty() {
        routes.push(Route {
            source: RouteSource::Keyword,
            method: "bm25".into(),
            k: cfg.keyword_k * k_factor,
        });
        why.push(format!("keyword(k={}) for rare terms {rare:?}", cfg.keyword_k * k_factor));
    }
    for (r, re) in api_patterns {
        if re.is_match(&eq.enhanced) {
            routes.push(Route {
                source: RouteSource::Api(r.id.clone()),
                method: "external".into(),
                k: r.k * k_factor,
            });
            why.push(format!("api:{} matched /{}/", r.id, r.pattern));
        }
    }
    RetrievalPlan {
        routes,
        rationale: why.join("; "),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    /// Chunk id, or the API reference for API items.
    pub id: String,
    pub is_chunk: bool,
    pub text: String,
    pub score: f64,
    pub rank: usize,
    pub source: RouteSource,
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub items: Vec<RetrievedItem>,
    /// Routes that failed or timed out, with the reason.
    pub degraded: Vec<(String, String)>,
    /// Hits removed by retrieval rails.
    pub filtered: Vec<String>,
    pub rail_outcomes: Vec<RailOutcome>,
}

impl RetrievedSet {
    pub fn chunk_ids(&self) -> BTreeSet<String> {
        self.items.iter().filter(|i| i.is_chunk).map(|i| i.id.clone()).collect()
    }
}

/// Run every route of the plan and pass each hit through the retrieval rails.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    plan: &RetrievalPlan,
    eq: &EnhancedQuery,
    snap: &IndexSnapshot,
    role: Option<&str>,
    rails: &Guardrails,
    api_clients: &BTreeMap<String, Arc<dyn ApiClient>>,
    api_cfg: &[ApiRouteConfig],
    embedder: &dyn Embedder,
) -> Result<RetrievedSet, PipelineError> {
    let mut set = RetrievedSet::default();
    let mut failed = 0;
    for route in &plan.routes {
        let raw: Result<Vec<RetrievedItem>, String> = match &route.source {
            RouteSource::Vector => snap
                .search_vector(&eq.query_embedding, route.k, role)
                .map_err(|e| e.to_string())
                .map(|hits| {
                    hits.into_iter()
                        .filter_map(|h| {
                            let c = snap.chunk(&h.chunk_id)?;
                            Some(RetrievedItem {
                                id: h.chunk_id,
                                is_chunk: true,
                                text: c.chunk.text.clone(),
                                score: h.score,
                                rank: h.rank,
                                source: RouteSource::Vector,
                                embedding: c.embedding.clone(),
                            })
                        })
                        .collect()
                }),
            RouteSource::Keyword => snap
                .search_keyword(&eq.terms, route.k, role)
                .map_err(|e| e.to_string())
                .map(|hits| {
                    hits.into_iter()
                        .filter_map(|h| {
                            let c = snap.chunk(&h.chunk_id)?;
                            Some(RetrievedItem {
                                id: h.chunk_id,
                                is_chunk: true,
                                text: c.chunk.text.clone(),
                                score: h.score,
                                rank: h.rank,
                                source: RouteSource::Keyword,
                                embedding: c.embedding.clone(),
                            })
                        })
                        .collect()
                }),
            RouteSource::Api(id) => match api_clients.get(id) {
                None => Err(format!("no client registered for api:{id}")),
                Some(client) => {
                    let timeout = api_cfg
                        .iter()
                        .find(|c| &c.id == id)
                        .map_or(2000, |c| c.timeout_ms);
                    fetch_with_timeout(client.clone(), &eq.enhanced, route.k, Duration::from_millis(timeout)).map(
                        |items| {
                            items
                                .into_iter()
                                .take(route.k)
                                .enumerate()
                                .map(|(i, it)| RetrievedItem {
                                    embedding: embedder.embed(&it.text).ok(),
                                    id: it.api_ref,
                                    is_chunk: false,
                                    text: it.text,
                                    score: it.score,
                                    rank: i + 1,
                                    source: RouteSource::Api(id.clone()),
                                })
                                .collect()
                        },
                    )
                }
            },
        };
        match raw {
            Ok(items) => {
                for mut item in items {
                    let (flags, acl) = match snap.chunk(&item.id).filter(|_| item.is_chunk) {
                        Some(c) => (Some(&c.flags), Some(c.chunk.acl.as_slice())),
                        None => (None, None),
                    };
                    let ctx = RailContext {
                        role,
                        flags,
                        acl,
                        ..Default::default()
                    };
                    let out = rails.apply_chain(Stage::Retrieval, &item.text, &ctx);
                    set.rail_outcomes.extend(out.outcomes.iter().cloned());
                    match out.payload {
                        Some(p) => {
                            item.text = p;
                            set.items.push(item);
                        }
                        None => set.filtered.push(item.id),
                    }
                }
            }
            Err(reason) => {
                failed += 1;
                set.degraded.push((route.source.to_string(), reason));
            }
        }
    }
    if failed == plan.routes.len() && failed > 0 {
        return Err(PipelineError::RetrievalUnavailable(
            set.degraded.iter().map(|(r, e)| format!("{r}: {e}")).collect::<Vec<_>>().join("; "),
        ));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub w_vector: f64,
    pub w_keyword: f64,
    pub w_api: f64,
    pub mmr_lambda: f64,
    pub dedup_threshold: f64,
    /// Context budget in whitespace tokens.
    pub token_budget: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            w_vector: 0.7,
            w_keyword: 0.3,
            w_api: 0.5,
            mmr_lambda: 0.7,
            dedup_threshold: 0.9,
            token_budget: 1024,
        }
    }
}

impl RerankConfig {
    fn weight(&self, s: &RouteSource) -> f64 {
        match s {
            RouteSource::Vector => self.w_vector,
            RouteSource::Keyword => self.w_keyword,
            RouteSource::Api(_) => self.w_api,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub id: String,
    pub is_chunk: bool,
    pub text: String,
    pub score: f64,
    pub sources: Vec<RouteSource>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub items: Vec<ContextItem>,
    pub token_budget: usize,
    /// Every candidate id ordered by fused score, before redundancy and budget pruning.
    pub ranking: Vec<String>,
}

impl RankedContext {
    pub fn chunk_ids(&self) -> Vec<String> {
        self.items.iter().filter(|i| i.is_chunk).map(|i| i.id.clone()).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|i| i.text.clone()).collect()
    }

    pub fn tokens(&self) -> usize {
        self.items.iter().map(|i| count_tokens(&i.text)).sum()
    }
}

struct Candidate {
    id: String,
    is_chunk: bool,
    text: String,
    fused: f64,
    sources: Vec<RouteSource>,
    embedding: Option<Embedding>,
}

/// Fuse per-source scores, then greedily select by maximal marginal relevance,
/// dropping near-duplicates and items that do not fit the token budget.
pub fn rerank(rs: &RetrievedSet, cfg: &RerankConfig) -> RankedContext {
    let mut max_by_source: BTreeMap<&RouteSource, f64> = BTreeMap::new();
    for it in &rs.items {
        let m = max_by_source.entry(&it.source).or_insert(0.0);
        *m = m.max(it.score.max(0.0));
    }
    let weight_sum: f64 = max_by_source.keys().map(|s| cfg.weight(s)).sum();
    let mut cands: BTreeMap<&str, Candidate> = BTreeMap::new();
    for it in &rs.items {
        let max = max_by_source[&it.source];
        let norm = if max > 0.0 { it.score.max(0.0) / max } else { 0.0 };
        let share = if weight_sum > 0.0 { cfg.weight(&it.source) / weight_sum } else { 0.0 };
        let c = cands.entry(it.id.as_str()).or_insert_with(|| Candidate {
            id: it.id.clone(),
            is_chunk: it.is_chunk,
            text: it.text.clone(),
            fused: 0.0,
            sources: Vec::new(),
            embedding: it.embedding.clone(),
        });
        if !c.sources.contains(&it.source) {
            c.fused += share * norm;
            c.sources.push(it.source.clone());
        }
    }
    let mut remaining: Vec<Candidate> = cands.into_values().collect();
    remaining.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.id.cmp(&b.id)));
    let ranking = remaining.iter().map(|c| c.id.clone()).collect();

    let mut selected: Vec<Candidate> = Vec::new();
    let mut used = 0usize;
    while !remaining.is_empty() {
        let max_sim = |c: &Candidate| {
            selected
                .iter()
                .filter_map(|s| match (&c.embedding, &s.embedding) {
                    (Some(a), Some(b)) => Some(a.cosine(b)),
                    _ => None,
                })
                .fold(0.0, f64::max)
        };
        let (best, sim) = remaining
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let sim = max_sim(c);
                (i, cfg.mmr_lambda * c.fused - (1.0 - cfg.mmr_lambda) * sim, sim)
            })
            .max_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then(remaining[a.0].fused.total_cmp(&remaining[b.0].fused))
                    .then_with(|| remaining[b.0].id.cmp(&remaining[a.0].id))
            })
            .map(|(i, _, sim)| (i, sim))
            .unwrap();
        let c = remaining.remove(best);
        if sim >= cfg.dedup_threshold {
            continue;
        }
        let t = count_tokens(&c.text);
        if used + t > cfg.token_budget {
            continue;
        }
        used += t;
        selected.push(c);
    }
    selected.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.id.cmp(&b.id)));
    RankedContext {
        items: selected
            .into_iter()
            .map(|c| ContextItem {
                id: c.id,
                is_chunk: c.is_chunk,
                text: c.text,
                score: c.fused,
                sources: c.sources,
            })
            .collect(),
        token_budget: cfg.token_budget,
        ranking,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub preamble: String,
    pub no_context: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: "Answer the question using only the numbered context passages. \
                       Cite the passages you use by their id in square brackets."
                .into(),
            no_context: "No context passages are available. \
                         If the question cannot be answered without them, say so."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub template_id: String,
    /// The context actually rendered (items may be dropped to fit the window).
    pub context: RankedContext,
    pub question: String,
    pub question_truncated: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render(t: &PromptTemplate, ctx: &[ContextItem], question: &str) -> String {
    let mut s = String::new();
    if ctx.is_empty() {
        s.push_str(&t.no_context);
        s.push_str("\n\n");
    } else {
        s.push_str(&t.preamble);
        s.push_str("\n\nContext:\n");
        for (i, it) in ctx.iter().enumerate() {
            s.push_str(&format!("[{}] id={} :: {}\n", i + 1, it.id, one_line(&it.text)));
        }
        s.push('\n');
    }
    s.push_str("Question: ");
    s.push_str(&one_line(question));
    s.push_str("\nAnswer:");
    s
}

/// Fill the template, dropping the lowest-scored context items and then
/// truncating the question until the prompt fits `window` tokens.
pub fn build_prompt(
    eq: &EnhancedQuery,
    ctx: &RankedContext,
    template_id: &str,
    templates: &BTreeMap<String, PromptTemplate>,
    window: usize,
) -> Result<Prompt, PipelineError> {
    let t = templates
        .get(template_id)
        .ok_or_else(|| PipelineError::Config(format!("prompt template {template_id:?} not found")))?;
    let mut items = ctx.items.clone();
    let q_tokens: Vec<&str> = eq.original.split_whitespace().collect();
    loop {
        let full = render(t, &items, &eq.original);
        let fits = count_tokens(&full) <= window;
        let overhead = count_tokens(&render(t, &items, ""));
        let room = window.saturating_sub(overhead);
        if fits || (room > 0 && (room >= q_tokens.len().min(16) || items.is_empty())) {
            let (question, truncated) = if fits {
                (eq.original.clone(), false)
            } else {
                (q_tokens[..room.min(q_tokens.len())].join(" "), true)
            };
            let context = RankedContext {
                items: items.clone(),
                token_budget: ctx.token_budget,
                ranking: ctx.ranking.clone(),
            };
            return Ok(Prompt {
                text: render(t, &items, &question),
                template_id: template_id.to_string(),
                context,
                question,
                question_truncated: truncated,
            });
        }
        if items.pop().is_none() {
            return Err(PipelineError::Config(format!(
                "context window of {window} tokens cannot hold the prompt template"
            )));
        }
    }
}

/// Apply dialog rails to the assembled prompt.
pub fn dialog_rails(rails: &Guardrails, prompt: &str, role: Option<&str>) -> ChainOutcome {
    rails.apply_chain(
        Stage::Dialog,
        prompt,
        &RailContext {
            role,
            ..Default::default()
        },
    )
}

pub fn generate(prompt: &str, client: &dyn LlmClient, max_tokens: usize) -> Result<String, PipelineError> {
    match client.complete(prompt, max_tokens) {
        Ok(t) if t.trim().is_empty() => Err(PipelineError::EmptyGeneration),
        Ok(t) => Ok(t),
        Err(LlmError::Transport(e)) | Err(LlmError::Malformed(e)) => Err(PipelineError::GenerationUnavailable(e)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub grounded: bool,
    pub faithfulness: f64,
    pub relevance: f64,
}

pub fn validate(draft: &str, ctx: &RankedContext, eq: &EnhancedQuery, embedder: &dyn Embedder, tau: f64) -> Validation {
    let f = faithfulness(draft, &ctx.texts());
    let relevance = embedder
        .embed(&strip_citations(draft))
        .map(|e| e.cosine(&eq.query_embedding))
        .unwrap_or(0.0);
    Validation {
        grounded: f >= tau,
        faithfulness: f,
        relevance,
    }
}

/// Token count used for budget checks on rendered prompts.
pub fn prompt_tokens(prompt: &str) -> usize {
    count_tokens(prompt)
}

/// Lowercased word tokens of the query; exposed for planners and tests.
pub fn query_tokens(q: &str) -> Vec<String> {
    tokenize(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::embedding::HashingEmbedder;

    fn eq(q: &str) -> EnhancedQuery {
        enhance_query(q, &IdentityEnhancer, &HashingEmbedder::default()).unwrap()
    }

    #[test]
    fn enhance_identity_and_terms() {
        let e = eq("return policy?");
        assert_eq!(e.enhanced, "return policy?");
        assert_eq!(e.terms, ["return", "policy"]);
        let s = eq("what is the");
        assert!(s.terms.is_empty());
        assert!((crate::retrieval::embedding::norm(&s.query_embedding.vector) - 1.0).abs() < 1e-9);
        assert_eq!(eq(&e.enhanced).enhanced, e.enhanced);
        assert!(enhance_query("  ", &IdentityEnhancer, &HashingEmbedder::default()).is_err());
    }

    fn item(id: &str, src: RouteSource, score: f64, text: &str) -> RetrievedItem {
        RetrievedItem {
            id: id.into(),
            is_chunk: true,
            text: text.into(),
            score,
            rank: 1,
            source: src,
            embedding: HashingEmbedder::default().embed(text).ok(),
        }
    }

    #[test]
    fn rerank_single_hit_normalizes_to_one() {
        let rs = RetrievedSet {
            items: vec![item("a", RouteSource::Vector, 0.42, "alpha beta")],
            ..Default::default()
        };
        let ctx = rerank(&rs, &RerankConfig::default());
        assert_eq!(ctx.items.len(), 1);
        assert!((ctx.items[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rerank_drops_near_duplicates() {
        let rs = RetrievedSet {
            items: vec![
                item("a", RouteSource::Vector, 0.9, "refunds within thirty days"),
                item("b", RouteSource::Vector, 0.8, "Refunds within thirty days"),
            ],
            ..Default::default()
        };
        let ctx = rerank(&rs, &RerankConfig::default());
        assert_eq!(ctx.chunk_ids(), ["a"]);
        assert_eq!(ctx.ranking, ["a", "b"]);
    }

    #[test]
    fn rerank_four_hit_hand_computation() {
        // vector scores 0.8, 0.4 and keyword scores 6, 3 over disjoint texts.
        let rs = RetrievedSet {
            items: vec![
                item("v1", RouteSource::Vector, 0.8, "apple orchard harvest"),
                item("v2", RouteSource::Vector, 0.4, "river canoe paddle"),
                item("k1", RouteSource::Keyword, 6.0, "granite quarry stone"),
                item("v1", RouteSource::Keyword, 3.0, "apple orchard harvest"),
            ],
            ..Default::default()
        };
        let ctx = rerank(&rs, &RerankConfig::default());
        // fused: v1 = .7*1 + .3*.5 = .85, k1 = .3*1 = .3, v2 = .7*.5 = .35
        let got: Vec<(&str, f64)> = ctx.items.iter().map(|i| (i.id.as_str(), i.score)).collect();
        let want = [("v1", 0.85), ("v2", 0.35), ("k1", 0.3)];
        for ((gi, gs), (wi, ws)) in got.iter().zip(want) {
            assert_eq!(*gi, wi);
            assert!((gs - ws).abs() < 1e-12);
        }
    }

    #[test]
    fn rerank_respects_budget() {
        let rs = RetrievedSet {
            items: vec![
                item("a", RouteSource::Vector, 0.9, "one two three four five six"),
                item("b", RouteSource::Vector, 0.8, "seven eight"),
            ],
            ..Default::default()
        };
        let ctx = rerank(
            &rs,
            &RerankConfig {
                token_budget: 4,
                ..Default::default()
            },
        );
        assert_eq!(ctx.chunk_ids(), ["b"]);
        assert!(ctx.tokens() <= 4);
    }

    fn templates() -> BTreeMap<String, PromptTemplate> {
        [("default".to_string(), PromptTemplate::default())].into()
    }

    #[test]
    fn prompt_numbering_and_no_context() {
        let q = eq("where is it");
        let ctx = RankedContext {
            items: (0..3)
                .map(|i| ContextItem {
                    id: format!("d#v1#c{i}"),
                    is_chunk: true,
                    text: format!("text {i}"),
                    score: 1.0,
                    sources: vec![RouteSource::Vector],
                })
                .collect(),
            ..Default::default()
        };
        let p = build_prompt(&q, &ctx, "default", &templates(), 2048).unwrap();
        assert_eq!(p.text.matches("] id=").count(), 3);
        assert!(p.text.contains("[3] id=d#v1#c2 :: text 2"));
        let empty = build_prompt(&q, &RankedContext::default(), "default", &templates(), 2048).unwrap();
        assert!(empty.text.starts_with("No context passages"));
        assert!(build_prompt(&q, &ctx, "missing", &templates(), 2048).is_err());
    }

    #[test]
    fn prompt_fits_window() {
        let long_q: String = (0..500).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let q = eq(&long_q);
        let ctx = RankedContext {
            items: vec![ContextItem {
                id: "a".into(),
                is_chunk: true,
                text: "x ".repeat(100),
                score: 1.0,
                sources: vec![],
            }],
            ..Default::default()
        };
        let p = build_prompt(&q, &ctx, "default", &templates(), 200).unwrap();
        assert!(prompt_tokens(&p.text) <= 200);
        assert!(p.question_truncated);
    }

    #[test]
    fn plan_rules() {
        let snap = IndexSnapshot::empty("hash-bow-256-v1", 256);
        let cfg = PlannerConfig {
            api_routes: vec![ApiRouteConfig {
                id: "weather".into(),
                pattern: "weather:*".into(),
                k: 3,
                timeout_ms: 100,
            }],
            ..Default::default()
        };
        let pats: Vec<_> = cfg
            .api_routes
            .iter()
            .map(|r| (r.clone(), Regex::new(&r.pattern).unwrap()))
            .collect();
        let p = plan(&eq("common words"), &snap, &cfg, &pats, 1);
        assert_eq!(p.routes.len(), 1);
        let p = plan(&eq("weather: sydney"), &snap, &cfg, &pats, 2);
        assert_eq!(p.routes[0].k, 20);
        assert_eq!(p.routes.last().unwrap().source, RouteSource::Api("weather".into()));
    }
}
