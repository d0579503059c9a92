//! The five pre-storage checks (quality, completeness, recency, uniqueness,
//! consistency), conflict tickets, and admission of verified documents into
//! the data lake.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datalake::{DataLake, DocumentVersion, LakeError};
use crate::ingestion::{parse_timestamp_str, DocMetadata, NormalizedDocument, Operation};
use crate::retrieval::embedding::{Embedder, Embedding};
use crate::text::{hash64, ContentHash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Quality,
    Completeness,
    Recency,
    Uniqueness,
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_key: String,
    pub version: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub verdict: Verdict,
    pub detail: String,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

impl CheckResult {
    fn new(check: CheckKind, verdict: Verdict, detail: impl Into<String>) -> Self {
        Self {
            check,
            verdict,
            detail: detail.into(),
            evidence: Vec::new(),
        }
    }

    fn skipped(check: CheckKind, why: &str) -> Self {
        Self::new(check, Verdict::Pass, format!("skipped: {why}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    AcceptAsNewVersion,
    Reject,
    DropDuplicate,
    /// Recency found the incoming version no newer than the live one.
    IgnoreStale,
    HoldForReview,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecencyDecision {
    NewVersion,
    StaleIgnore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DuplicateDecision {
    Unique,
    ExactDup { of: String, version: u32 },
    NearDup { of: String, version: u32, similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub doc_key: String,
    pub results: Vec<CheckResult>,
    pub decision: Decision,
    #[serde(default)]
    pub recency: Option<RecencyDecision>,
    #[serde(default)]
    pub duplicate: Option<DuplicateDecision>,
    #[serde(default)]
    pub tickets: Vec<ConflictTicket>,
}

impl VerificationReport {
    /// Report with a decision and no check results (deletes, tooling).
    pub fn bare(doc_key: &str, decision: Decision) -> Self {
        Self {
            doc_key: doc_key.to_string(),
            results: Vec::new(),
            decision,
            recency: None,
            duplicate: None,
            tickets: Vec::new(),
        }
    }

    pub fn result(&self, check: CheckKind) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.check == check)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Open,
    ResolvedKeepA,
    ResolvedKeepB,
    ResolvedKeepBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    KeepA,
    KeepB,
    KeepBoth,
}

impl Resolution {
    fn status(self) -> TicketStatus {
        match self {
            Self::KeepA => TicketStatus::ResolvedKeepA,
            Self::KeepB => TicketStatus::ResolvedKeepB,
            Self::KeepBoth => TicketStatus::ResolvedKeepBoth,
        }
    }
}

/// A pair of similar documents with differing content. Side `a` is the
/// incoming document, side `b` the live one it was compared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictTicket {
    pub ticket_id: String,
    pub doc_key_a: String,
    /// `None` while the incoming document is held for review.
    pub version_a: Option<u32>,
    pub doc_key_b: String,
    pub version_b: u32,
    pub similarity: f64,
    pub trust_a: f64,
    pub trust_b: f64,
    pub status: TicketStatus,
    #[serde(default)]
    pub resolver: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    /// Accept the incoming document; tickets without a clear trust winner
    /// stay open with both sides live.
    #[default]
    TrustWeighted,
    /// Hold the incoming document out of the lake until a reviewer decides.
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationPolicy {
    pub required_fields: Vec<String>,
    /// Fallback truncation cap when the source config has none.
    pub size_cap: Option<usize>,
    pub tau_dup: f64,
    pub tau_cons: f64,
    pub delta_trust: f64,
    pub conflicts: ConflictPolicy,
    pub default_trust: f64,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        Self {
            required_fields: vec!["timestamp".into(), "source".into()],
            size_cap: None,
            tau_dup: 0.95,
            tau_cons: 0.85,
            delta_trust: 0.2,
            conflicts: ConflictPolicy::TrustWeighted,
            default_trust: 0.5,
        }
    }
}

impl VerificationPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("tau_dup", self.tau_dup),
            ("tau_cons", self.tau_cons),
            ("delta_trust", self.delta_trust),
            ("default_trust", self.default_trust),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("verification.{name} = {v} outside [0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("ticket {0} not found")]
    NotFound(String),
    #[error("ticket {ticket_id} is {status:?}; only open tickets can be resolved")]
    InvalidTransition { ticket_id: String, status: TicketStatus },
    #[error(transparent)]
    Lake(#[from] LakeError),
}

/// What the checks need to know about one live version.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub doc_key: String,
    pub version: u32,
    pub content_hash: ContentHash,
    pub embedding: Option<Embedding>,
    pub timestamp: Option<DateTime<Utc>>,
    pub source: String,
}

/// Content hashes and embeddings of the live corpus.
#[derive(Debug, Clone, Default)]
pub struct CorpusView {
    entries: BTreeMap<String, CorpusEntry>,
}

impl CorpusView {
    pub fn from_lake(lake: &DataLake, embedder: &dyn Embedder) -> Self {
        let mut view = Self::default();
        for v in lake.live_versions() {
            view.upsert(&v, embedder);
        }
        view
    }

    pub fn upsert(&mut self, v: &DocumentVersion, embedder: &dyn Embedder) {
        self.entries.insert(
            v.doc_key.clone(),
            CorpusEntry {
                doc_key: v.doc_key.clone(),
                version: v.version,
                content_hash: v.content_hash.clone(),
                embedding: embedder.embed(&v.text).ok(),
                timestamp: effective_timestamp(&v.metadata, &v.text, v.fetched_at),
                source: v.metadata.source.clone(),
            },
        );
    }

    pub fn remove(&mut self, doc_key: &str) {
        self.entries.remove(doc_key);
    }

    pub fn get(&self, doc_key: &str) -> Option<&CorpusEntry> {
        self.entries.get(doc_key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bring the view in line with the lake's current live set for one key.
    pub fn sync_key(&mut self, lake: &DataLake, doc_key: &str, embedder: &dyn Embedder) {
        match lake.get(doc_key, None, None).ok().filter(|_| lake.live_version_of(doc_key).is_some()) {
            Some(v) if self.get(doc_key).map(|e| e.version) != Some(v.version) => self.upsert(&v, embedder),
            Some(_) => {}
            None => self.remove(doc_key),
        }
    }
}

static EMBEDDED_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(\d{4}-\d{2}-\d{2}(?:T\d{2}:\d{2}(?::\d{2})?(?:Z|[+-]\d{2}:\d{2}))?)\b").unwrap()
});

/// Metadata timestamp, else a date embedded near the start of the text, else fetch time.
pub fn effective_timestamp(
    meta: &DocMetadata,
    text: &str,
    fetched_at: Option<DateTime<Utc>>,
) -> Option<DateTime<Utc>> {
    if meta.timestamp.is_some() {
        return meta.timestamp;
    }
    let head: String = text.chars().take(200).collect();
    EMBEDDED_DATE
        .captures_iter(&head)
        .find_map(|c| parse_timestamp_str(&c[1]))
        .or(fetched_at)
}

pub fn check_quality(doc: &NormalizedDocument) -> CheckResult {
    let total = doc.text.chars().count();
    if doc.text.contains('\u{FFFD}') {
        return CheckResult::new(CheckKind::Quality, Verdict::Fail, "contains replacement character U+FFFD");
    }
    let controls = doc
        .text
        .chars()
        .filter(|c| c.is_control() && *c != '\n' && *c != '\t')
        .count();
    let printable = doc
        .text
        .chars()
        .filter(|c| !c.is_control() || *c == '\n' || *c == '\t')
        .count();
    let ratio = if total == 0 { 0.0 } else { printable as f64 / total as f64 };
    if ratio < 0.8 {
        return CheckResult::new(
            CheckKind::Quality,
            Verdict::Fail,
            format!("printable ratio {ratio:.3} below 0.8"),
        );
    }
    if controls > 0 {
        return CheckResult::new(
            CheckKind::Quality,
            Verdict::Fail,
            format!("{controls} control characters"),
        );
    }
    CheckResult::new(CheckKind::Quality, Verdict::Pass, format!("printable ratio {ratio:.3}"))
}

fn ends_sentence(text: &str) -> bool {
    text.trim_end()
        .trim_end_matches(['"', '\'', ')', ']', '\u{201d}'])
        .ends_with(['.', '!', '?', ':', ';'])
}

pub fn check_completeness(
    doc: &NormalizedDocument,
    required_fields: &[String],
    size_cap: Option<usize>,
) -> CheckResult {
    let missing: Vec<&str> = required_fields
        .iter()
        .filter(|f| doc.metadata.field(f).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return CheckResult::new(CheckKind::Completeness, Verdict::Fail, missing.join(","));
    }
    if let Some(cap) = size_cap {
        if doc.text.chars().count() == cap && !ends_sentence(&doc.text) {
            return CheckResult::new(
                CheckKind::Completeness,
                Verdict::Fail,
                format!("truncated: text length equals source cap {cap} and ends mid-sentence"),
            );
        }
    }
    CheckResult::new(CheckKind::Completeness, Verdict::Pass, "all required fields present")
}

/// Recency against the live version of the same key. The boolean reports a
/// tie (equal timestamps with different content).
pub fn check_recency(
    doc: &NormalizedDocument,
    existing: Option<&CorpusEntry>,
) -> (CheckResult, RecencyDecision, bool) {
    let Some(incoming) = effective_timestamp(&doc.metadata, &doc.text, doc.fetched_at) else {
        return (
            CheckResult::new(CheckKind::Recency, Verdict::Fail, "no parseable timestamp"),
            RecencyDecision::StaleIgnore,
            false,
        );
    };
    let Some(prev) = existing else {
        return (
            CheckResult::new(CheckKind::Recency, Verdict::Pass, "no existing version"),
            RecencyDecision::NewVersion,
            false,
        );
    };
    let evidence = vec![Evidence {
        doc_key: prev.doc_key.clone(),
        version: prev.version,
        score: 1.0,
    }];
    match prev.timestamp {
        Some(latest) if incoming <= latest => {
            let tie = incoming == latest && prev.content_hash != ContentHash::of(&doc.text);
            let mut r = CheckResult::new(
                CheckKind::Recency,
                Verdict::Flag,
                format!("incoming {incoming} not newer than live {latest}"),
            );
            r.evidence = evidence;
            (r, RecencyDecision::StaleIgnore, tie)
        }
        _ => {
            let mut r = CheckResult::new(CheckKind::Recency, Verdict::Pass, "newer than live version");
            r.evidence = evidence;
            (r, RecencyDecision::NewVersion, false)
        }
    }
}

pub fn check_uniqueness(
    doc: &NormalizedDocument,
    doc_embedding: Option<&Embedding>,
    view: &CorpusView,
    tau_dup: f64,
) -> (CheckResult, DuplicateDecision) {
    let hash = ContentHash::of(&doc.text);
    if let Some(e) = view.entries().find(|e| e.content_hash == hash) {
        let mut r = CheckResult::new(
            CheckKind::Uniqueness,
            Verdict::Fail,
            format!("exact duplicate of {}@{}", e.doc_key, e.version),
        );
        r.evidence.push(Evidence {
            doc_key: e.doc_key.clone(),
            version: e.version,
            score: 1.0,
        });
        return (
            r,
            DuplicateDecision::ExactDup {
                of: e.doc_key.clone(),
                version: e.version,
            },
        );
    }
    let best = doc_embedding.and_then(|q| {
        view.entries()
            .filter(|e| e.doc_key != doc.doc_key)
            .filter_map(|e| e.embedding.as_ref().map(|v| (e, q.cosine(v))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.doc_key.cmp(&a.0.doc_key)))
    });
    match best {
        Some((e, sim)) if sim >= tau_dup => {
            let mut r = CheckResult::new(
                CheckKind::Uniqueness,
                Verdict::Flag,
                format!("near duplicate of {}@{} (cosine {sim:.4})", e.doc_key, e.version),
            );
            r.evidence.push(Evidence {
                doc_key: e.doc_key.clone(),
                version: e.version,
                score: sim.clamp(0.0, 1.0),
            });
            (
                r,
                DuplicateDecision::NearDup {
                    of: e.doc_key.clone(),
                    version: e.version,
                    similarity: sim,
                },
            )
        }
        _ => (
            CheckResult::new(CheckKind::Uniqueness, Verdict::Pass, "unique"),
            DuplicateDecision::Unique,
        ),
    }
}

fn ticket_id(a: &str, b: &str, vb: u32, hash: &ContentHash) -> String {
    format!("tkt-{:016x}", hash64(&format!("{a}\u{1f}{b}\u{1f}{vb}\u{1f}{}", hash.full)))
}

/// Open a ticket for every live document of another key that is similar
/// enough to be a contradiction candidate.
pub fn check_consistency(
    doc: &NormalizedDocument,
    doc_embedding: Option<&Embedding>,
    view: &CorpusView,
    trust: &dyn Fn(&str) -> f64,
    policy: &VerificationPolicy,
) -> Vec<ConflictTicket> {
    let Some(q) = doc_embedding else {
        return Vec::new();
    };
    let hash = ContentHash::of(&doc.text);
    let trust_a = trust(&doc.metadata.source);
    view.entries()
        .filter(|e| e.doc_key != doc.doc_key && e.content_hash != hash)
        .filter_map(|e| e.embedding.as_ref().map(|v| (e, q.cosine(v))))
        .filter(|(_, sim)| *sim >= policy.tau_cons)
        .map(|(e, sim)| {
            let trust_b = trust(&e.source);
            let status = if (trust_a - trust_b).abs() >= policy.delta_trust {
                if trust_a > trust_b {
                    TicketStatus::ResolvedKeepA
                } else {
                    TicketStatus::ResolvedKeepB
                }
            } else {
                TicketStatus::Open
            };
            ConflictTicket {
                ticket_id: ticket_id(&doc.doc_key, &e.doc_key, e.version, &hash),
                doc_key_a: doc.doc_key.clone(),
                version_a: None,
                doc_key_b: e.doc_key.clone(),
                version_b: e.version,
                similarity: sim.clamp(0.0, 1.0),
                trust_a,
                trust_b,
                status,
                resolver: (status != TicketStatus::Open).then(|| "trust-weight".to_string()),
            }
        })
        .collect()
}

/// Run all five checks and derive the decision.
pub fn verify(
    doc: &NormalizedDocument,
    view: &CorpusView,
    embedder: &dyn Embedder,
    policy: &VerificationPolicy,
    size_cap: Option<usize>,
    trust: &dyn Fn(&str) -> f64,
) -> VerificationReport {
    if doc.operation == Operation::Delete {
        return VerificationReport::bare(&doc.doc_key, Decision::Accept);
    }
    let quality = check_quality(doc);
    let completeness = check_completeness(doc, &policy.required_fields, size_cap.or(policy.size_cap));
    let existing = view.get(&doc.doc_key);
    let (recency, recency_decision, tie) = check_recency(doc, existing);
    let embedding = embedder.embed(&doc.text).ok();
    let (uniqueness, dup) = check_uniqueness(doc, embedding.as_ref(), view, policy.tau_dup);

    let rejected = quality.verdict == Verdict::Fail || completeness.verdict == Verdict::Fail;
    let stale = recency_decision == RecencyDecision::StaleIgnore;
    let mut tickets = Vec::new();
    let consistency = if tie {
        CheckResult::new(
            CheckKind::Consistency,
            Verdict::Flag,
            "equal timestamp with different content; live version kept",
        )
    } else if !matches!(dup, DuplicateDecision::Unique) {
        CheckResult::skipped(CheckKind::Consistency, "duplicate")
    } else if rejected {
        CheckResult::skipped(CheckKind::Consistency, "rejected")
    } else if stale {
        CheckResult::skipped(CheckKind::Consistency, "stale")
    } else {
        tickets = check_consistency(doc, embedding.as_ref(), view, trust, policy);
        let open = tickets.iter().filter(|t| t.status == TicketStatus::Open).count();
        let mut r = if tickets.is_empty() {
            CheckResult::new(CheckKind::Consistency, Verdict::Pass, "no conflicting documents")
        } else {
            CheckResult::new(
                CheckKind::Consistency,
                Verdict::Flag,
                format!("{} conflict candidates, {open} open", tickets.len()),
            )
        };
        r.evidence = tickets
            .iter()
            .map(|t| Evidence {
                doc_key: t.doc_key_b.clone(),
                version: t.version_b,
                score: t.similarity,
            })
            .collect();
        r
    };

    let decision = if rejected {
        Decision::Reject
    } else if matches!(dup, DuplicateDecision::ExactDup { .. }) {
        Decision::DropDuplicate
    } else if stale {
        Decision::IgnoreStale
    } else if policy.conflicts == ConflictPolicy::Human
        && tickets.iter().any(|t| t.status == TicketStatus::Open)
    {
        Decision::HoldForReview
    } else if existing.is_some() {
        Decision::AcceptAsNewVersion
    } else {
        Decision::Accept
    };

    VerificationReport {
        doc_key: doc.doc_key.clone(),
        results: vec![quality, completeness, recency, uniqueness, consistency],
        decision,
        recency: Some(recency_decision),
        duplicate: Some(dup),
        tickets,
    }
}

/// A ticket resolution as recorded for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub ticket_id: String,
    pub resolution: Resolution,
    pub resolver: String,
    /// `(doc_key, version)` archived as a consequence.
    pub archived: Vec<(String, u32)>,
    pub disputed: Vec<String>,
}

/// Review queue: conflict tickets plus documents held for a decision.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TicketStore {
    pub tickets: BTreeMap<String, ConflictTicket>,
    pub held: BTreeMap<String, NormalizedDocument>,
    pub resolutions: Vec<ResolutionRecord>,
}

impl TicketStore {
    pub fn open(&self) -> impl Iterator<Item = &ConflictTicket> {
        self.tickets.values().filter(|t| t.status == TicketStatus::Open)
    }

    pub fn get(&self, id: &str) -> Option<&ConflictTicket> {
        self.tickets.get(id)
    }

    /// `(ticket_id, doc_key, version)` for each live side of each open ticket.
    pub fn live_refs(&self) -> Vec<(String, String, u32)> {
        let mut out = Vec::new();
        for t in self.open() {
            if let Some(va) = t.version_a {
                out.push((t.ticket_id.clone(), t.doc_key_a.clone(), va));
            }
            out.push((t.ticket_id.clone(), t.doc_key_b.clone(), t.version_b));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmitOutcome {
    pub report: VerificationReport,
    pub stored: Option<DocumentVersion>,
    /// Versions archived because an auto-resolved conflict went against them.
    pub archived: Vec<(String, u32)>,
}

/// Runs verification and applies its decision to the lake.
#[derive(Debug, Clone, Default)]
pub struct Gatekeeper {
    pub policy: VerificationPolicy,
    pub trust: HashMap<String, f64>,
    pub size_caps: HashMap<String, usize>,
    pub tickets: TicketStore,
}

impl Gatekeeper {
    pub fn new(policy: VerificationPolicy) -> Self {
        Self {
            policy,
            ..Default::default()
        }
    }

    pub fn trust_of(&self, source: &str) -> f64 {
        self.trust.get(source).copied().unwrap_or(self.policy.default_trust)
    }

    pub fn verify(&self, doc: &NormalizedDocument, view: &CorpusView, embedder: &dyn Embedder) -> VerificationReport {
        let cap = self.size_caps.get(&doc.metadata.source).copied();
        verify(doc, view, embedder, &self.policy, cap, &|s| self.trust_of(s))
    }

    /// Verify `doc` and store it when accepted. Keeps `view` in step with the lake.
    pub fn admit(
        &mut self,
        doc: &NormalizedDocument,
        lake: &mut DataLake,
        view: &mut CorpusView,
        embedder: &dyn Embedder,
    ) -> Result<AdmitOutcome, VerifyError> {
        if doc.operation == Operation::Delete {
            let report = VerificationReport::bare(&doc.doc_key, Decision::Accept);
            let stored = match lake.delete(&doc.doc_key) {
                Ok(v) => Some(v),
                Err(LakeError::NotFound(_)) => None,
                Err(e) => return Err(e.into()),
            };
            view.remove(&doc.doc_key);
            self.drop_tickets_for(&doc.doc_key);
            return Ok(AdmitOutcome {
                report,
                stored,
                archived: Vec::new(),
            });
        }
        let mut report = self.verify(doc, view, embedder);
        let mut outcome = AdmitOutcome {
            report: report.clone(),
            stored: None,
            archived: Vec::new(),
        };
        match report.decision {
            Decision::Accept | Decision::AcceptAsNewVersion => {
                let stored = lake.upsert(doc, &report)?;
                view.upsert(&stored, embedder);
                // tickets on the version just superseded are moot
                self.close_dangling(lake);
                for t in &mut report.tickets {
                    t.version_a = Some(stored.version);
                }
                for t in report.tickets.clone() {
                    match t.status {
                        TicketStatus::ResolvedKeepA => {
                            self.archive_side(lake, view, &t.doc_key_b, t.version_b, &t.ticket_id, &mut outcome.archived)?
                        }
                        TicketStatus::ResolvedKeepB => {
                            self.archive_side(lake, view, &t.doc_key_a, stored.version, &t.ticket_id, &mut outcome.archived)?
                        }
                        _ => {}
                    }
                    self.tickets.tickets.insert(t.ticket_id.clone(), t);
                }
                outcome.stored = Some(stored);
            }
            Decision::HoldForReview => {
                for t in &report.tickets {
                    self.tickets.tickets.insert(t.ticket_id.clone(), t.clone());
                }
                self.tickets.held.insert(doc.doc_key.clone(), doc.clone());
            }
            Decision::Reject | Decision::DropDuplicate | Decision::IgnoreStale => {}
        }
        outcome.report = report;
        Ok(outcome)
    }

    fn archive_side(
        &mut self,
        lake: &mut DataLake,
        view: &mut CorpusView,
        doc_key: &str,
        version: u32,
        ticket_id: &str,
        archived: &mut Vec<(String, u32)>,
    ) -> Result<(), VerifyError> {
        if lake.live_version_of(doc_key) == Some(version) {
            lake.archive(doc_key, &format!("conflict {ticket_id}"))?;
            view.remove(doc_key);
            archived.push((doc_key.to_string(), version));
            self.close_dangling(lake);
        }
        Ok(())
    }

    /// Tickets whose live side disappeared can no longer be acted on.
    fn close_dangling(&mut self, lake: &DataLake) {
        for t in self.tickets.tickets.values_mut() {
            if t.status != TicketStatus::Open {
                continue;
            }
            let a_gone = t.version_a.is_some_and(|v| lake.live_version_of(&t.doc_key_a) != Some(v));
            let b_gone = lake.live_version_of(&t.doc_key_b) != Some(t.version_b);
            if a_gone || b_gone {
                t.status = if a_gone { TicketStatus::ResolvedKeepB } else { TicketStatus::ResolvedKeepA };
                t.resolver = Some("superseded".into());
            }
        }
    }

    fn drop_tickets_for(&mut self, doc_key: &str) {
        for t in self.tickets.tickets.values_mut() {
            if t.status == TicketStatus::Open && (t.doc_key_a == doc_key || t.doc_key_b == doc_key) {
                t.status = if t.doc_key_a == doc_key {
                    TicketStatus::ResolvedKeepB
                } else {
                    TicketStatus::ResolvedKeepA
                };
                t.resolver = Some("deleted".into());
            }
        }
    }

    /// Keep `view`'s entries and open tickets consistent after an external lake change.
    pub fn after_lake_change(&mut self, lake: &DataLake) {
        self.close_dangling(lake);
    }

    pub fn resolve_ticket(
        &mut self,
        ticket_id: &str,
        resolution: Resolution,
        resolver: &str,
        lake: &mut DataLake,
        view: &mut CorpusView,
        embedder: &dyn Embedder,
    ) -> Result<(ConflictTicket, ResolutionRecord), VerifyError> {
        let ticket = self
            .tickets
            .tickets
            .get(ticket_id)
            .cloned()
            .ok_or_else(|| VerifyError::NotFound(ticket_id.to_string()))?;
        if ticket.status != TicketStatus::Open {
            return Err(VerifyError::InvalidTransition {
                ticket_id: ticket_id.to_string(),
                status: ticket.status,
            });
        }
        let mut record = ResolutionRecord {
            ticket_id: ticket_id.to_string(),
            resolution,
            resolver: resolver.to_string(),
            archived: Vec::new(),
            disputed: Vec::new(),
        };
        let mut updated = ticket.clone();
        updated.status = resolution.status();
        updated.resolver = Some(resolver.to_string());
        self.tickets.tickets.insert(ticket_id.to_string(), updated.clone());

        let held = if ticket.version_a.is_none() {
            self.tickets.held.get(&ticket.doc_key_a).cloned()
        } else {
            None
        };
        let mut archived = Vec::new();
        match resolution {
            Resolution::KeepA => {
                let va = match held {
                    Some(doc) => {
                        self.tickets.held.remove(&doc.doc_key);
                        let v = lake.upsert(&doc, &VerificationReport::bare(&doc.doc_key, Decision::Accept))?;
                        view.upsert(&v, embedder);
                        Some(v.version)
                    }
                    None => ticket.version_a,
                };
                if let Some(va) = va {
                    updated.version_a = Some(va);
                    self.tickets.tickets.insert(ticket_id.to_string(), updated.clone());
                }
                self.archive_side(lake, view, &ticket.doc_key_b, ticket.version_b, ticket_id, &mut archived)?;
            }
            Resolution::KeepB => match held {
                Some(doc) => {
                    self.tickets.held.remove(&doc.doc_key);
                    for t in self.tickets.tickets.values_mut() {
                        if t.status == TicketStatus::Open && t.doc_key_a == doc.doc_key && t.version_a.is_none() {
                            t.status = TicketStatus::ResolvedKeepB;
                            t.resolver = Some(resolver.to_string());
                        }
                    }
                }
                None => {
                    if let Some(va) = ticket.version_a {
                        self.archive_side(lake, view, &ticket.doc_key_a, va, ticket_id, &mut archived)?;
                    }
                }
            },
            Resolution::KeepBoth => {
                if let Some(doc) = held {
                    self.tickets.held.remove(&doc.doc_key);
                    let v = lake.upsert(&doc, &VerificationReport::bare(&doc.doc_key, Decision::Accept))?;
                    view.upsert(&v, embedder);
                }
                for key in [&ticket.doc_key_a, &ticket.doc_key_b] {
                    if lake.live_version_of(key).is_some() {
                        let v = lake.amend_metadata(
                            key,
                            "disputed",
                            Value::String(ticket_id.to_string()),
                            &format!("conflict {ticket_id} kept both"),
                        )?;
                        view.upsert(&v, embedder);
                        record.disputed.push(key.clone());
                    }
                }
                self.close_dangling(lake);
            }
        }
        record.archived = archived;
        self.tickets.resolutions.push(record.clone());
        Ok((updated, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::DocMetadata;
    use crate::retrieval::embedding::HashingEmbedder;

    fn ts(s: &str) -> Option<DateTime<Utc>> {
        parse_timestamp_str(s)
    }

    fn doc(key: &str, source: &str, text: &str, when: &str) -> NormalizedDocument {
        NormalizedDocument {
            doc_key: key.into(),
            text: text.into(),
            metadata: DocMetadata {
                source: source.into(),
                timestamp: ts(when),
                ..Default::default()
            },
            acl: vec![],
            operation: Operation::Add,
            fetched_at: None,
        }
    }

    #[test]
    fn quality_checks() {
        let clean = doc("k", "s", "A clean English paragraph about returns.", "2024-01-01");
        assert_eq!(check_quality(&clean).verdict, Verdict::Pass);
        let bad = doc("k", "s", "broken \u{FFFD} text", "2024-01-01");
        assert_eq!(check_quality(&bad).verdict, Verdict::Fail);
        let mut t: String = "a".repeat(70);
        t.push_str(&"\u{0}".repeat(30));
        let nul = doc("k", "s", &t, "2024-01-01");
        let r = check_quality(&nul);
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.detail.contains("0.700"), "{}", r.detail);
    }

    #[test]
    fn completeness_checks() {
        let req = vec!["timestamp".to_string(), "source".to_string()];
        let ok = doc("k", "s", "Complete.", "2024-01-01");
        assert_eq!(check_completeness(&ok, &req, None).verdict, Verdict::Pass);
        let mut missing = ok.clone();
        missing.metadata.timestamp = None;
        let r = check_completeness(&missing, &req, None);
        assert_eq!((r.verdict, r.detail.as_str()), (Verdict::Fail, "timestamp"));
        let text = "We spoke to the compa";
        let cut = doc("k", "s", text, "2024-01-01");
        let cap = text.chars().count();
        assert_eq!(check_completeness(&cut, &req, Some(cap)).verdict, Verdict::Fail);
        assert_eq!(check_completeness(&cut, &req, Some(cap + 1)).verdict, Verdict::Pass);
    }

    fn entry(key: &str, text: &str, when: &str) -> CorpusEntry {
        CorpusEntry {
            doc_key: key.into(),
            version: 1,
            content_hash: ContentHash::of(text),
            embedding: HashingEmbedder::default().embed(text).ok(),
            timestamp: ts(when),
            source: "s".into(),
        }
    }

    #[test]
    fn recency_rules() {
        let d = doc("k", "s", "new text", "2024-01-01");
        assert_eq!(check_recency(&d, None).1, RecencyDecision::NewVersion);
        let later = entry("k", "old text", "2024-06-01");
        let (r, dec, tie) = check_recency(&d, Some(&later));
        assert_eq!((dec, tie, r.verdict), (RecencyDecision::StaleIgnore, false, Verdict::Flag));
        let same = entry("k", "other text", "2024-01-01");
        let (_, dec, tie) = check_recency(&d, Some(&same));
        assert_eq!((dec, tie), (RecencyDecision::StaleIgnore, true));
    }

    #[test]
    fn embedded_date_used_when_metadata_missing() {
        let mut d = doc("k", "s", "Updated 2024-03-05: new prices.", "2024-01-01");
        d.metadata.timestamp = None;
        assert_eq!(effective_timestamp(&d.metadata, &d.text, None), ts("2024-03-05"));
        d.text = "no date here".into();
        assert_eq!(effective_timestamp(&d.metadata, &d.text, ts("2023-01-01")), ts("2023-01-01"));
        assert_eq!(check_recency(&doc("k", "s", "x", "bogus"), None).0.verdict, Verdict::Fail);
    }

    #[test]
    fn uniqueness_exact_and_normalized() {
        let mut view = CorpusView::default();
        view.entries.insert("a".into(), entry("a", "Same text here", "2024-01-01"));
        let e = HashingEmbedder::default();
        let d = doc("b", "s", "same   text here  ", "2024-01-01");
        let (_, dec) = check_uniqueness(&d, e.embed(&d.text).ok().as_ref(), &view, 0.95);
        assert!(matches!(dec, DuplicateDecision::ExactDup { .. }));
    }

    #[test]
    fn consistency_trust_resolution() {
        let e = HashingEmbedder::default();
        let mut view = CorpusView::default();
        let base = "the warranty covers parts and labour for two years from purchase date";
        view.entries.insert("a".into(), entry("a", base, "2024-01-01"));
        let d = doc("b", "s2", "the warranty covers parts and labour for three years from purchase date", "2024-01-01");
        let emb = e.embed(&d.text).ok();
        let policy = VerificationPolicy::default();
        assert!(check_consistency(&d, emb.as_ref(), &CorpusView::default(), &|_| 0.5, &policy).is_empty());
        let trust = |s: &str| if s == "s2" { 0.9 } else { 0.3 };
        let t = check_consistency(&d, emb.as_ref(), &view, &trust, &policy);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].status, TicketStatus::ResolvedKeepA);
        let t = check_consistency(&d, emb.as_ref(), &view, &|_| 0.5, &policy);
        assert_eq!(t[0].status, TicketStatus::Open);
    }

    #[test]
    fn verify_decisions_and_counts() {
        let e = HashingEmbedder::default();
        let mut lake = DataLake::in_memory();
        let mut view = CorpusView::default();
        let mut gk = Gatekeeper::default();
        let d = doc("a", "s", "A brand new document about shipping times.", "2024-01-01");
        let out = gk.admit(&d, &mut lake, &mut view, &e).unwrap();
        assert_eq!(out.report.decision, Decision::Accept);
        assert_eq!(out.report.results.len(), 5);
        assert!(out.report.results.iter().all(|r| r.verdict == Verdict::Pass));

        let dup = doc("b", "s", "A brand new document about shipping times.", "2024-02-01");
        let out = gk.admit(&dup, &mut lake, &mut view, &e).unwrap();
        assert_eq!(out.report.decision, Decision::DropDuplicate);
        assert!(out.report.result(CheckKind::Consistency).unwrap().detail.starts_with("skipped"));
        assert_eq!(lake.current_seq(), 1);

        let newer = doc("a", "s", "Shipping times changed to five days.", "2024-03-01");
        let out = gk.admit(&newer, &mut lake, &mut view, &e).unwrap();
        assert_eq!(out.report.decision, Decision::AcceptAsNewVersion);
        assert_eq!(out.stored.unwrap().version, 2);

        // verbatim re-ingest is always an exact duplicate
        let again = gk.verify(&newer, &view, &e);
        assert!(matches!(again.duplicate, Some(DuplicateDecision::ExactDup { .. })));

        let del = NormalizedDocument {
            operation: Operation::Delete,
            text: String::new(),
            ..newer.clone()
        };
        let out = gk.admit(&del, &mut lake, &mut view, &e).unwrap();
        assert!(out.report.results.is_empty());
    }

    fn conflicting_pair(gk: &mut Gatekeeper, lake: &mut DataLake, view: &mut CorpusView) -> String {
        let e = HashingEmbedder::default();
        let a = doc("b", "s", "the warranty covers parts and labour for two years from purchase date", "2024-01-01");
        gk.admit(&a, lake, view, &e).unwrap();
        let b = doc("a", "s", "the warranty covers parts and labour for three years from purchase date", "2024-01-01");
        let out = gk.admit(&b, lake, view, &e).unwrap();
        assert_eq!(out.report.tickets.len(), 1);
        out.report.tickets[0].ticket_id.clone()
    }

    #[test]
    fn resolve_keep_a_archives_b_and_double_resolve_fails() {
        let e = HashingEmbedder::default();
        let (mut gk, mut lake, mut view) = (Gatekeeper::default(), DataLake::in_memory(), CorpusView::default());
        let id = conflicting_pair(&mut gk, &mut lake, &mut view);
        assert_eq!(gk.tickets.open().count(), 1);
        let (t, rec) = gk
            .resolve_ticket(&id, Resolution::KeepA, "alice", &mut lake, &mut view, &e)
            .unwrap();
        assert_eq!(t.status, TicketStatus::ResolvedKeepA);
        assert_eq!(rec.archived, vec![("b".to_string(), 1)]);
        assert!(lake.live_version_of("b").is_none());
        assert!(matches!(
            gk.resolve_ticket(&id, Resolution::KeepB, "bob", &mut lake, &mut view, &e),
            Err(VerifyError::InvalidTransition { .. })
        ));
        assert!(matches!(
            gk.resolve_ticket("nope", Resolution::KeepB, "bob", &mut lake, &mut view, &e),
            Err(VerifyError::NotFound(_))
        ));
    }

    #[test]
    fn resolve_keep_both_tags_disputed() {
        let e = HashingEmbedder::default();
        let (mut gk, mut lake, mut view) = (Gatekeeper::default(), DataLake::in_memory(), CorpusView::default());
        let id = conflicting_pair(&mut gk, &mut lake, &mut view);
        let (_, rec) = gk
            .resolve_ticket(&id, Resolution::KeepBoth, "alice", &mut lake, &mut view, &e)
            .unwrap();
        assert!(rec.archived.is_empty());
        for k in ["a", "b"] {
            let v = lake.get(k, None, None).unwrap();
            assert_eq!(v.metadata.extra["disputed"], Value::String(id.clone()));
        }
        let inputs = crate::datalake::IntegrityInputs {
            chunks: vec![],
            tickets: gk.tickets.live_refs(),
        };
        assert!(lake.integrity_check(&inputs).is_clean());
    }

    #[test]
    fn human_policy_holds_then_admits() {
        let e = HashingEmbedder::default();
        let mut gk = Gatekeeper::new(VerificationPolicy {
            conflicts: ConflictPolicy::Human,
            ..Default::default()
        });
        let (mut lake, mut view) = (DataLake::in_memory(), CorpusView::default());
        let a = doc("b", "s", "the warranty covers parts and labour for two years from purchase date", "2024-01-01");
        gk.admit(&a, &mut lake, &mut view, &e).unwrap();
        let b = doc("a", "s", "the warranty covers parts and labour for three years from purchase date", "2024-01-01");
        let out = gk.admit(&b, &mut lake, &mut view, &e).unwrap();
        assert_eq!(out.report.decision, Decision::HoldForReview);
        assert!(lake.live_version_of("a").is_none());
        let id = out.report.tickets[0].ticket_id.clone();
        gk.resolve_ticket(&id, Resolution::KeepA, "rev", &mut lake, &mut view, &e).unwrap();
        assert_eq!(lake.live_version_of("a"), Some(1));
        assert!(lake.live_version_of("b").is_none());
    }
}
