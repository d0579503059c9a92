//! LLM and external API clients.

use std::collections::BTreeSet;
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{content_terms, split_sentences};

pub const ABSTENTION: &str = "No supporting context found.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("llm transport: {0}")]
    Transport(String),
    #[error("llm response malformed: {0}")]
    Malformed(String),
}

/// Text in, text out.
pub trait LlmClient: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, LlmError>;
}

static CONTEXT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\[(\d+)\] id=(\S+) :: (.*)$").unwrap());

/// Context items and question recovered from a prompt rendered by the pipeline.
pub fn parse_prompt(prompt: &str) -> (Vec<(String, String)>, String) {
    let mut items = Vec::new();
    let mut question = String::new();
    for line in prompt.lines() {
        if let Some(c) = CONTEXT_LINE.captures(line) {
            items.push((c[2].to_string(), c[3].to_string()));
        } else if let Some(q) = line.strip_prefix("Question: ") {
            question = q.to_string();
        }
    }
    (items, question)
}

/// Deterministic extractive generator: picks up to three context sentences
/// with the largest content-term overlap with the question and cites them.
#[derive(Debug, Clone)]
pub struct MockLlm {
    id: String,
    pub max_sentences: usize,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self {
            id: "mock-extractive-v1".into(),
            max_sentences: 3,
        }
    }
}

impl LlmClient for MockLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, LlmError> {
        let (items, question) = parse_prompt(prompt);
        if items.is_empty() {
            return Ok(ABSTENTION.to_string());
        }
        let q: BTreeSet<String> = content_terms(&question).into_iter().collect();
        // (overlap, item position, sentence position, sentence, id)
        let mut cands: Vec<(usize, usize, usize, String, &str)> = Vec::new();
        for (i, (id, text)) in items.iter().enumerate() {
            for (j, s) in split_sentences(text).into_iter().enumerate() {
                let terms: BTreeSet<String> = content_terms(&s).into_iter().collect();
                let overlap = terms.intersection(&q).count();
                cands.push((overlap, i, j, s, id));
            }
        }
        if cands.is_empty() {
            return Ok(ABSTENTION.to_string());
        }
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let best = cands[0].0;
        let mut picked: Vec<_> = if best == 0 {
            cands.into_iter().take(1).collect()
        } else {
            cands.into_iter().filter(|c| c.0 > 0).take(self.max_sentences).collect()
        };
        picked.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
        let mut out = Vec::new();
        let mut used = 0;
        for (_, _, _, s, id) in picked {
            let n = s.split_whitespace().count() + 1;
            if used > 0 && used + n > max_tokens {
                break;
            }
            used += n;
            out.push(format!("{s} [{id}]"));
        }
        Ok(out.join(" "))
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub const ENV_LLM_ENDPOINT: &str = "RAGOPS_LLM_ENDPOINT";
pub const ENV_LLM_API_KEY: &str = "RAGOPS_LLM_API_KEY";

/// JSON-over-HTTP completion client: POST `{prompt, max_tokens}`, expects `{text}`.
#[derive(Debug, Clone)]
pub struct HttpLlmClient {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpLlmClient {
    pub fn new(id: &str, endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            id: id.to_string(),
            endpoint: endpoint.to_string(),
            api_key,
            timeout,
        }
    }

    /// Endpoint and key from `RAGOPS_LLM_ENDPOINT` / `RAGOPS_LLM_API_KEY`.
    pub fn from_env(id: &str, timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(ENV_LLM_ENDPOINT).ok()?;
        Some(Self::new(id, &endpoint, std::env::var(ENV_LLM_API_KEY).ok(), timeout))
    }
}

impl LlmClient for HttpLlmClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, LlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::to_string(&CompletionRequest { prompt, max_tokens })
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body.as_str()).map_err(|e| LlmError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        Ok(parsed.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiItem {
    pub api_ref: String,
    pub text: String,
    pub score: f64,
}

/// An external retrieval source reached through an API route.
pub trait ApiClient: Send + Sync {
    fn id(&self) -> &str;
    fn fetch(&self, query: &str, k: usize) -> Result<Vec<ApiItem>, String>;
}

/// GET `{endpoint}?q=<query>&k=<k>` returning a JSON array of [`ApiItem`].
#[derive(Debug, Clone)]
pub struct HttpApiClient {
    pub id: String,
    pub endpoint: String,
}

impl ApiClient for HttpApiClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn fetch(&self, query: &str, k: usize) -> Result<Vec<ApiItem>, String> {
        let mut resp = ureq::get(&self.endpoint)
            .query("q", query)
            .query("k", k.to_string())
            .call()
            .map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

/// Run `fetch` on a helper thread and give up after `timeout`.
pub fn fetch_with_timeout(
    client: Arc<dyn ApiClient>,
    query: &str,
    k: usize,
    timeout: Duration,
) -> Result<Vec<ApiItem>, String> {
    let (tx, rx) = crossbeam::channel::bounded(1);
    let q = query.to_string();
    std::thread::spawn(move || {
        let _ = tx.send(client.fetch(&q, k));
    });
    match rx.recv_timeout(timeout) {
        Ok(r) => r,
        Err(_) => Err(format!("timed out after {} ms", timeout.as_millis())),
    }
}
