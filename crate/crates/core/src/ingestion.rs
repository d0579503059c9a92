//! Pulling raw items from sources and normalizing them into text documents.
//!
//! Sources are polled with an opaque [`SourceCursor`]; each poll returns the
//! items that changed since the cursor (additions, updates and deletions) in
//! a stable order. Items that cannot be read are turned into
//! [`QuarantineRecord`]s instead of failing the batch.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::LazyLock;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    FileDir,
    JsonlFeed,
    HttpPoll,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Add,
    Update,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclaredFormat {
    PlainText,
    Json,
    Markdown,
    PdfStub,
    Other,
}

impl DeclaredFormat {
    pub fn from_extension(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("txt") | Some("text") => Self::PlainText,
            Some("md") | Some("markdown") => Self::Markdown,
            Some("json") => Self::Json,
            Some("pdf") => Self::PdfStub,
            _ => Self::Other,
        }
    }
}

impl fmt::Display for DeclaredFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::PlainText => "plain_text",
            Self::Json => "json",
            Self::Markdown => "markdown",
            Self::PdfStub => "pdf_stub",
            Self::Other => "other",
        };
        f.write_str(s)
    }
}

/// Which JSON payload fields carry the body and the well-known metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMap {
    pub body: String,
    pub title: String,
    pub author: String,
    pub timestamp: String,
    pub acl: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            body: "body".into(),
            title: "title".into(),
            author: "author".into(),
            timestamp: "timestamp".into(),
            acl: "acl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub source_id: String,
    pub kind: SourceKind,
    #[serde(default)]
    pub location: String,
    /// Seconds between polls; 0 means one-shot.
    #[serde(default)]
    pub poll_interval_secs: u64,
    #[serde(default = "default_trust")]
    pub trust_weight: f64,
    #[serde(default)]
    pub default_acl: Vec<String>,
    #[serde(default)]
    pub field_map: FieldMap,
    /// Largest document (in characters) the source can deliver; texts of
    /// exactly this length are suspected truncations.
    #[serde(default)]
    pub size_cap: Option<usize>,
}

fn default_trust() -> f64 {
    0.5
}

impl SourceConfig {
    pub fn new(source_id: impl Into<String>, kind: SourceKind, location: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            kind,
            location: location.into(),
            poll_interval_secs: 0,
            trust_weight: default_trust(),
            default_acl: Vec::new(),
            field_map: FieldMap::default(),
            size_cap: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.source_id.is_empty() {
            return Err("source_id must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.trust_weight) {
            return Err(format!(
                "source {}: trust_weight {} outside [0,1]",
                self.source_id, self.trust_weight
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    pub source_id: String,
    pub external_id: String,
    pub operation: Operation,
    #[serde(with = "base64_bytes")]
    pub payload: Vec<u8>,
    pub declared_format: DeclaredFormat,
    pub fetched_at: DateTime<Utc>,
    /// Metadata delivered alongside the payload (feed records, file stats).
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

impl RawItem {
    pub fn text(
        source_id: &str,
        external_id: &str,
        operation: Operation,
        body: &str,
        fetched_at: DateTime<Utc>,
    ) -> Self {
        Self {
            source_id: source_id.into(),
            external_id: external_id.into(),
            operation,
            payload: body.as_bytes().to_vec(),
            declared_format: DeclaredFormat::PlainText,
            fetched_at,
            metadata: BTreeMap::new(),
        }
    }

    pub fn delete(source_id: &str, external_id: &str, fetched_at: DateTime<Utc>) -> Self {
        Self {
            source_id: source_id.into(),
            external_id: external_id.into(),
            operation: Operation::Delete,
            payload: Vec::new(),
            declared_format: DeclaredFormat::PlainText,
            fetched_at,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

mod base64_bytes {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DocMetadata {
    pub timestamp: Option<DateTime<Utc>>,
    pub authorship: Option<String>,
    pub source: String,
    pub title: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

impl DocMetadata {
    /// Value of a named field as text; `None` when missing or empty.
    pub fn field(&self, name: &str) -> Option<String> {
        let v = match name {
            "timestamp" => self.timestamp.map(|t| t.to_rfc3339()),
            "authorship" | "author" => self.authorship.clone(),
            "source" => Some(self.source.clone()),
            "title" => self.title.clone(),
            other => self.extra.get(other).map(|v| match v {
                Value::String(s) => s.clone(),
                Value::Null => String::new(),
                v => v.to_string(),
            }),
        };
        v.filter(|s| !s.trim().is_empty())
    }

    pub fn flag(&self, name: &str) -> bool {
        matches!(self.extra.get(name), Some(Value::Bool(true)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDocument {
    pub doc_key: String,
    pub text: String,
    pub metadata: DocMetadata,
    pub acl: Vec<String>,
    pub operation: Operation,
    #[serde(default)]
    pub fetched_at: Option<DateTime<Utc>>,
}

pub fn doc_key(source_id: &str, external_id: &str) -> String {
    format!("{source_id}:{external_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub source_id: String,
    pub external_id: String,
    pub fetched_at: Option<DateTime<Utc>>,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("quarantined: {0}")]
    Quarantine(String),
    #[error("unsupported format {0} and no converter registered")]
    UnsupportedFormat(DeclaredFormat),
    #[error("source {source_id} unreachable ({reason}); retry after {retry_after:?}")]
    SourceUnreachable {
        source_id: String,
        reason: String,
        retry_after: Duration,
    },
    #[error("source kind {0:?} cannot be polled")]
    PollingUnsupported(SourceKind),
}

impl IngestError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::SourceUnreachable { .. })
    }
}

/// Opaque resume position for a source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCursor {
    /// Feed lines already consumed.
    #[serde(default)]
    pub position: u64,
    /// File-dir sources: relative path -> mtime (ns) as of the last poll.
    #[serde(default)]
    pub files: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, Default)]
pub struct PollOutcome {
    pub items: Vec<RawItem>,
    pub cursor: SourceCursor,
    pub quarantined: Vec<QuarantineRecord>,
}

fn backoff_hint(cfg: &SourceConfig) -> Duration {
    Duration::from_secs(cfg.poll_interval_secs.max(30))
}

pub fn poll_source(cfg: &SourceConfig, cursor: &SourceCursor) -> Result<PollOutcome, IngestError> {
    match cfg.kind {
        SourceKind::FileDir => poll_dir(cfg, cursor),
        SourceKind::JsonlFeed => {
            let body = std::fs::read_to_string(&cfg.location).map_err(|e| {
                IngestError::SourceUnreachable {
                    source_id: cfg.source_id.clone(),
                    reason: e.to_string(),
                    retry_after: backoff_hint(cfg),
                }
            })?;
            let fallback = std::fs::metadata(&cfg.location)
                .and_then(|m| m.modified())
                .map(DateTime::<Utc>::from)
                .unwrap_or_else(|_| Utc.timestamp_opt(0, 0).unwrap());
            Ok(parse_feed(cfg, &body, cursor, fallback))
        }
        SourceKind::HttpPoll => {
            let mut resp = ureq::get(&cfg.location)
                .call()
                .map_err(|e| IngestError::SourceUnreachable {
                    source_id: cfg.source_id.clone(),
                    reason: e.to_string(),
                    retry_after: backoff_hint(cfg),
                })?;
            let body = resp.body_mut().read_to_string().map_err(|e| {
                IngestError::SourceUnreachable {
                    source_id: cfg.source_id.clone(),
                    reason: e.to_string(),
                    retry_after: backoff_hint(cfg),
                }
            })?;
            Ok(parse_feed(cfg, &body, cursor, Utc::now()))
        }
        SourceKind::Manual => Err(IngestError::PollingUnsupported(SourceKind::Manual)),
    }
}

fn poll_dir(cfg: &SourceConfig, cursor: &SourceCursor) -> Result<PollOutcome, IngestError> {
    let root = Path::new(&cfg.location);
    if !root.is_dir() {
        return Err(IngestError::SourceUnreachable {
            source_id: cfg.source_id.clone(),
            reason: format!("{} is not a readable directory", root.display()),
            retry_after: backoff_hint(cfg),
        });
    }
    let mut quarantined = Vec::new();
    let mut listing: Vec<(i64, String, std::path::PathBuf)> = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(false) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                quarantined.push(QuarantineRecord {
                    source_id: cfg.source_id.clone(),
                    external_id: e
                        .path()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                    fetched_at: None,
                    reason: format!("listing error: {e}"),
                });
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        let mtime = entry
            .metadata()
            .ok()
            .and_then(|m| m.modified().ok())
            .map(|t| DateTime::<Utc>::from(t).timestamp_nanos_opt().unwrap_or(0));
        match mtime {
            Some(m) => listing.push((m, rel, entry.into_path())),
            None => quarantined.push(QuarantineRecord {
                source_id: cfg.source_id.clone(),
                external_id: rel,
                fetched_at: None,
                reason: "cannot read modification time".into(),
            }),
        }
    }
    listing.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));

    let mut next = cursor.clone();
    let mut items = Vec::new();
    let mut present = std::collections::BTreeSet::new();
    for (mtime, rel, path) in listing {
        present.insert(rel.clone());
        let op = match cursor.files.get(&rel) {
            None => Operation::Add,
            Some(&seen) if seen != mtime => Operation::Update,
            Some(_) => continue,
        };
        let fetched_at = DateTime::from_timestamp_nanos(mtime);
        match std::fs::read(&path) {
            Ok(payload) => {
                next.files.insert(rel.clone(), mtime);
                items.push(RawItem {
                    source_id: cfg.source_id.clone(),
                    external_id: rel,
                    operation: op,
                    payload,
                    declared_format: DeclaredFormat::from_extension(&path),
                    fetched_at,
                    metadata: BTreeMap::from([(
                        "timestamp".to_string(),
                        Value::String(fetched_at.to_rfc3339()),
                    )]),
                });
            }
            Err(e) => quarantined.push(QuarantineRecord {
                source_id: cfg.source_id.clone(),
                external_id: rel,
                fetched_at: Some(fetched_at),
                reason: format!("read failed: {e}"),
            }),
        }
    }
    let watermark = cursor.files.values().copied().max().unwrap_or(0);
    for gone in cursor.files.keys().filter(|k| !present.contains(*k)) {
        next.files.remove(gone);
        items.push(RawItem::delete(
            &cfg.source_id,
            gone,
            DateTime::from_timestamp_nanos(watermark),
        ));
    }
    Ok(PollOutcome {
        items,
        cursor: next,
        quarantined,
    })
}

/// One line of a JSONL feed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedRecord {
    pub external_id: String,
    #[serde(default = "default_op")]
    pub operation: Operation,
    #[serde(default = "default_format")]
    pub format: DeclaredFormat,
    #[serde(default)]
    pub payload: String,
    /// `"utf8"` (default) or `"base64"`.
    #[serde(default)]
    pub encoding: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
    #[serde(default)]
    pub fetched_at: Option<DateTime<Utc>>,
}

fn default_op() -> Operation {
    Operation::Add
}

fn default_format() -> DeclaredFormat {
    DeclaredFormat::PlainText
}

impl FeedRecord {
    pub fn into_raw(self, source_id: &str, fallback_time: DateTime<Utc>) -> Result<RawItem, String> {
        let payload = match self.encoding.as_deref() {
            None | Some("utf8") | Some("utf-8") => self.payload.into_bytes(),
            Some("base64") => base64::engine::general_purpose::STANDARD
                .decode(self.payload.as_bytes())
                .map_err(|e| format!("bad base64 payload: {e}"))?,
            Some(other) => return Err(format!("unknown payload encoding {other:?}")),
        };
        let payload = if self.operation == Operation::Delete {
            Vec::new()
        } else {
            payload
        };
        Ok(RawItem {
            source_id: source_id.to_string(),
            external_id: self.external_id,
            operation: self.operation,
            payload,
            declared_format: self.format,
            fetched_at: self.fetched_at.unwrap_or(fallback_time),
            metadata: self.metadata,
        })
    }
}

/// Parse complete feed lines after `cursor.position`. A trailing line without
/// a newline is treated as still being written and left for the next poll.
pub fn parse_feed(
    cfg: &SourceConfig,
    body: &str,
    cursor: &SourceCursor,
    fallback_time: DateTime<Utc>,
) -> PollOutcome {
    let mut out = PollOutcome {
        cursor: cursor.clone(),
        ..Default::default()
    };
    for (lineno, line) in body.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            break;
        }
        let lineno = lineno as u64;
        if lineno < cursor.position {
            continue;
        }
        out.cursor.position = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<FeedRecord>(line)
            .map_err(|e| format!("malformed feed line {}: {e}", lineno + 1))
            .and_then(|r| r.into_raw(&cfg.source_id, fallback_time));
        match parsed {
            Ok(item) => out.items.push(item),
            Err(reason) => out.quarantined.push(QuarantineRecord {
                source_id: cfg.source_id.clone(),
                external_id: format!("line:{}", lineno + 1),
                fetched_at: Some(fallback_time),
                reason,
            }),
        }
    }
    out
}

/// Converts payloads of formats the core does not handle (PDF, media).
pub trait FormatConverter: Send + Sync {
    fn convert(&self, payload: &[u8]) -> Result<String, String>;
}

/// Normalizer with an optional registry of format converter plugins.
#[derive(Clone, Default)]
pub struct Normalizer {
    plugins: HashMap<DeclaredFormat, Arc<dyn FormatConverter>>,
}

impl fmt::Debug for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Normalizer")
            .field("plugins", &self.plugins.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Normalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, format: DeclaredFormat, converter: Arc<dyn FormatConverter>) {
        self.plugins.insert(format, converter);
    }

    pub fn normalize(
        &self,
        item: &RawItem,
        cfg: &SourceConfig,
    ) -> Result<NormalizedDocument, IngestError> {
        let key = doc_key(&cfg.source_id, &item.external_id);
        let mut metadata = DocMetadata {
            source: cfg.source_id.clone(),
            ..Default::default()
        };
        let mut acl = cfg.default_acl.clone();
        apply_fields(&item.metadata, &cfg.field_map, &mut metadata, &mut acl, false)?;

        if item.operation == Operation::Delete {
            return Ok(NormalizedDocument {
                doc_key: key,
                text: String::new(),
                metadata,
                acl,
                operation: Operation::Delete,
                fetched_at: Some(item.fetched_at),
            });
        }

        let raw_text = match item.declared_format {
            DeclaredFormat::PlainText => decode_utf8(&item.payload)?,
            DeclaredFormat::Markdown => {
                let (text, title) = strip_markdown(&decode_utf8(&item.payload)?);
                if metadata.title.is_none() {
                    metadata.title = title;
                }
                text
            }
            DeclaredFormat::Json => {
                let s = decode_utf8(&item.payload)?;
                let obj: serde_json::Map<String, Value> = serde_json::from_str(&s)
                    .map_err(|e| IngestError::Quarantine(format!("invalid JSON payload: {e}")))?;
                let body = match obj.get(&cfg.field_map.body) {
                    Some(Value::String(b)) => b.clone(),
                    _ => {
                        return Err(IngestError::Quarantine(format!(
                            "JSON payload lacks string field {:?}",
                            cfg.field_map.body
                        )))
                    }
                };
                let rest: BTreeMap<String, Value> = obj
                    .into_iter()
                    .filter(|(k, _)| *k != cfg.field_map.body)
                    .collect();
                apply_fields(&rest, &cfg.field_map, &mut metadata, &mut acl, true)?;
                body
            }
            fmt @ (DeclaredFormat::PdfStub | DeclaredFormat::Other) => match self.plugins.get(&fmt) {
                Some(conv) => conv
                    .convert(&item.payload)
                    .map_err(|e| IngestError::Quarantine(format!("converter failed: {e}")))?,
                None => return Err(IngestError::UnsupportedFormat(fmt)),
            },
        };
        let text = normalize_whitespace(&raw_text);
        if text.is_empty() {
            return Err(IngestError::Quarantine("empty text after normalization".into()));
        }
        Ok(NormalizedDocument {
            doc_key: key,
            text,
            metadata,
            acl,
            operation: item.operation,
            fetched_at: Some(item.fetched_at),
        })
    }
}

/// Normalize with the built-in formats only.
pub fn normalize(item: &RawItem, cfg: &SourceConfig) -> Result<NormalizedDocument, IngestError> {
    Normalizer::default().normalize(item, cfg)
}

fn decode_utf8(bytes: &[u8]) -> Result<String, IngestError> {
    String::from_utf8(bytes.to_vec())
        .map_err(|e| IngestError::Quarantine(format!("undecodable bytes: {e}")))
}

fn apply_fields(
    fields: &BTreeMap<String, Value>,
    map: &FieldMap,
    meta: &mut DocMetadata,
    acl: &mut Vec<String>,
    strict_timestamp: bool,
) -> Result<(), IngestError> {
    for (k, v) in fields {
        if *k == map.title {
            meta.title = value_text(v);
        } else if *k == map.author || k == "authorship" {
            meta.authorship = value_text(v);
        } else if *k == map.timestamp {
            match parse_timestamp(v) {
                Some(t) => meta.timestamp = Some(t),
                None if strict_timestamp => {
                    return Err(IngestError::Quarantine(format!("unparseable timestamp {v}")))
                }
                None => {}
            }
        } else if *k == map.acl {
            match v {
                Value::Array(roles) => {
                    *acl = roles
                        .iter()
                        .filter_map(|r| r.as_str().map(str::to_string))
                        .collect();
                }
                _ => return Err(IngestError::Quarantine("acl must be a list of roles".into())),
            }
        } else if k == "source" {
            // the configured source id always wins
        } else {
            meta.extra.insert(k.clone(), v.clone());
        }
    }
    Ok(())
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn parse_timestamp(v: &Value) -> Option<DateTime<Utc>> {
    match v {
        Value::String(s) => parse_timestamp_str(s),
        Value::Number(n) => n.as_i64().and_then(|secs| Utc.timestamp_opt(secs, 0).single()),
        _ => None,
    }
}

pub fn parse_timestamp_str(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| Utc.from_utc_datetime(&dt))
}

static BLANK_RUNS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n{3,}").unwrap());

/// Unify line endings, strip trailing spaces per line, collapse runs of blank
/// lines and trim the whole text.
pub fn normalize_whitespace(s: &str) -> String {
    let unified = s.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified
        .split('\n')
        .map(|l| l.trim_end_matches([' ', '\t', '\u{a0}']))
        .collect();
    let joined = lines.join("\n");
    BLANK_RUNS.replace_all(joined.trim(), "\n\n").into_owned()
}

static MD_IMAGE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"!\[([^\]]*)\]\([^)]*\)").unwrap());
static MD_LINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\]]*)\]\([^)]*\)").unwrap());
static MD_EMPH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\*\*|__|`)").unwrap());
static MD_HEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s{0,3}#{1,6}\s+(.*?)\s*#*\s*$").unwrap());

/// Reduce Markdown to readable text; returns the text and the first heading.
fn strip_markdown(src: &str) -> (String, Option<String>) {
    let mut title = None;
    let mut out = Vec::new();
    for line in src.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        let line = if let Some(c) = MD_HEADING.captures(line) {
            let h = c[1].to_string();
            if title.is_none() && !h.is_empty() {
                title = Some(h.clone());
            }
            h
        } else {
            line.to_string()
        };
        let line = MD_IMAGE.replace_all(&line, "$1");
        let line = MD_LINK.replace_all(&line, "$1");
        out.push(MD_EMPH.replace_all(&line, "").into_owned());
    }
    (out.join("\n"), title)
}

/// Per-item outcome of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Disposition {
    Forwarded,
    Quarantined { reason: String },
    SupersededInBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemDisposition {
    pub external_id: String,
    pub fetched_at: DateTime<Utc>,
    #[serde(flatten)]
    pub disposition: Disposition,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub source_id: String,
    pub total: usize,
    pub normalized: usize,
    /// Includes items superseded by a later item in the same batch.
    pub quarantined: usize,
    pub dispositions: Vec<ItemDisposition>,
    #[serde(skip)]
    pub documents: Vec<NormalizedDocument>,
    #[serde(skip)]
    pub quarantine: Vec<QuarantineRecord>,
}

pub fn ingest_batch(items: &[RawItem], cfg: &SourceConfig, normalizer: &Normalizer) -> IngestReceipt {
    // last write wins per external_id, by fetched_at then batch position
    let mut winner: HashMap<&str, usize> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        winner
            .entry(item.external_id.as_str())
            .and_modify(|w| {
                if items[i].fetched_at >= items[*w].fetched_at {
                    *w = i;
                }
            })
            .or_insert(i);
    }

    let mut receipt = IngestReceipt {
        source_id: cfg.source_id.clone(),
        total: items.len(),
        ..Default::default()
    };
    for (i, item) in items.iter().enumerate() {
        let disposition = if item.source_id != cfg.source_id {
            Disposition::Quarantined {
                reason: format!("item from source {} in batch for {}", item.source_id, cfg.source_id),
            }
        } else if winner[item.external_id.as_str()] != i {
            Disposition::SupersededInBatch
        } else {
            match normalizer.normalize(item, cfg) {
                Ok(doc) => {
                    receipt.documents.push(doc);
                    Disposition::Forwarded
                }
                Err(e) => Disposition::Quarantined {
                    reason: e.to_string(),
                },
            }
        };
        match &disposition {
            Disposition::Forwarded => receipt.normalized += 1,
            Disposition::Quarantined { reason } => {
                receipt.quarantined += 1;
                receipt.quarantine.push(QuarantineRecord {
                    source_id: item.source_id.clone(),
                    external_id: item.external_id.clone(),
                    fetched_at: Some(item.fetched_at),
                    reason: reason.clone(),
                });
            }
            Disposition::SupersededInBatch => {
                receipt.quarantined += 1;
                receipt.quarantine.push(QuarantineRecord {
                    source_id: item.source_id.clone(),
                    external_id: item.external_id.clone(),
                    fetched_at: Some(item.fetched_at),
                    reason: "superseded in batch".into(),
                });
            }
        }
        receipt.dispositions.push(ItemDisposition {
            external_id: item.external_id.clone(),
            fetched_at: item.fetched_at,
            disposition,
        });
    }
    receipt
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp_str(s).unwrap()
    }

    fn cfg() -> SourceConfig {
        SourceConfig::new("kb", SourceKind::Manual, "")
    }

    #[test]
    fn plain_text_newlines_normalized() {
        let item = RawItem::text("kb", "x", Operation::Add, "hello\r\n\r\nworld", ts("2024-01-01"));
        let doc = normalize(&item, &cfg()).unwrap();
        assert_eq!(doc.text, "hello\n\nworld");
        assert_eq!(doc.metadata.source, "kb");
        assert_eq!(doc.doc_key, "kb:x");
    }

    #[test]
    fn json_fields_mapped() {
        let mut item = RawItem::text(
            "kb",
            "j",
            Operation::Add,
            r#"{"title":"T","body":"B","author":"A"}"#,
            ts("2024-01-01"),
        );
        item.declared_format = DeclaredFormat::Json;
        let doc = normalize(&item, &cfg()).unwrap();
        assert_eq!(doc.text, "B");
        assert_eq!(doc.metadata.title.as_deref(), Some("T"));
        assert_eq!(doc.metadata.authorship.as_deref(), Some("A"));
        assert!(doc.metadata.extra.is_empty());
    }

    #[test]
    fn json_acl_overrides_default() {
        let mut c = cfg();
        c.default_acl = vec!["staff".into()];
        let mut item = RawItem::text(
            "kb",
            "j",
            Operation::Add,
            r#"{"body":"B","acl":["legal"]}"#,
            ts("2024-01-01"),
        );
        item.declared_format = DeclaredFormat::Json;
        assert_eq!(normalize(&item, &c).unwrap().acl, vec!["legal"]);
        item.payload = br#"{"body":"B"}"#.to_vec();
        assert_eq!(normalize(&item, &c).unwrap().acl, vec!["staff"]);
    }

    #[test]
    fn delete_passthrough() {
        let item = RawItem::delete("kb", "x", ts("2024-01-01"));
        let doc = normalize(&item, &cfg()).unwrap();
        assert_eq!(doc.operation, Operation::Delete);
        assert_eq!(doc.text, "");
    }

    #[test]
    fn undecodable_bytes_quarantined() {
        let mut item = RawItem::text("kb", "x", Operation::Add, "", ts("2024-01-01"));
        item.payload = vec![0x66, 0xff, 0xfe];
        assert!(matches!(normalize(&item, &cfg()), Err(IngestError::Quarantine(_))));
    }

    #[test]
    fn pdf_requires_plugin() {
        struct Fake;
        impl FormatConverter for Fake {
            fn convert(&self, _: &[u8]) -> Result<String, String> {
                Ok("extracted text".into())
            }
        }
        let mut item = RawItem::text("kb", "x.pdf", Operation::Add, "%PDF", ts("2024-01-01"));
        item.declared_format = DeclaredFormat::PdfStub;
        assert!(matches!(
            normalize(&item, &cfg()),
            Err(IngestError::UnsupportedFormat(DeclaredFormat::PdfStub))
        ));
        let mut n = Normalizer::new();
        n.register(DeclaredFormat::PdfStub, Arc::new(Fake));
        assert_eq!(n.normalize(&item, &cfg()).unwrap().text, "extracted text");
    }

    #[test]
    fn markdown_title_and_links() {
        let mut item = RawItem::text(
            "kb",
            "m.md",
            Operation::Add,
            "# Returns\n\nSee [the policy](http://x) for **details**.",
            ts("2024-01-01"),
        );
        item.declared_format = DeclaredFormat::Markdown;
        let doc = normalize(&item, &cfg()).unwrap();
        assert_eq!(doc.metadata.title.as_deref(), Some("Returns"));
        assert_eq!(doc.text, "Returns\n\nSee the policy for details.");
    }

    #[test]
    fn batch_empty() {
        let r = ingest_batch(&[], &cfg(), &Normalizer::default());
        assert_eq!((r.normalized, r.quarantined), (0, 0));
    }

    #[test]
    fn batch_three_valid_one_invalid() {
        let t = ts("2024-01-01");
        let mut bad = RawItem::text("kb", "d", Operation::Add, "", t);
        bad.payload = vec![0xc3, 0x28];
        let items = vec![
            RawItem::text("kb", "a", Operation::Add, "alpha", t),
            RawItem::text("kb", "b", Operation::Add, "beta", t),
            RawItem::text("kb", "c", Operation::Add, "gamma", t),
            bad,
        ];
        let r = ingest_batch(&items, &cfg(), &Normalizer::default());
        assert_eq!((r.normalized, r.quarantined), (3, 1));
        assert_eq!(r.documents.len(), 3);
    }

    #[test]
    fn batch_duplicate_external_id_last_wins() {
        let items = vec![
            RawItem::text("kb", "a", Operation::Add, "old", ts("2024-01-01")),
            RawItem::text("kb", "a", Operation::Update, "new", ts("2024-02-01")),
        ];
        let r = ingest_batch(&items, &cfg(), &Normalizer::default());
        assert_eq!(r.dispositions[0].disposition, Disposition::SupersededInBatch);
        assert_eq!(r.dispositions[1].disposition, Disposition::Forwarded);
        assert_eq!(r.documents[0].text, "new");
        assert_eq!(r.normalized + r.quarantined, 2);
    }

    #[test]
    fn poll_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let c = SourceConfig::new("fs", SourceKind::FileDir, dir.path().to_str().unwrap());
        let out = poll_source(&c, &SourceCursor::default()).unwrap();
        assert!(out.items.is_empty());
        assert_eq!(out.cursor, SourceCursor::default());
    }

    #[test]
    fn poll_dir_orders_by_mtime_then_name_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "bee").unwrap();
        fs::write(dir.path().join("a.txt"), "ay").unwrap();
        let same = std::time::SystemTime::UNIX_EPOCH + Duration::from_secs(1_700_000_000);
        for f in ["a.txt", "b.txt"] {
            fs::File::options()
                .write(true)
                .open(dir.path().join(f))
                .unwrap()
                .set_modified(same)
                .unwrap();
        }
        let c = SourceConfig::new("fs", SourceKind::FileDir, dir.path().to_str().unwrap());
        let out = poll_source(&c, &SourceCursor::default()).unwrap();
        let ids: Vec<_> = out.items.iter().map(|i| i.external_id.as_str()).collect();
        assert_eq!(ids, ["a.txt", "b.txt"]);
        assert!(out.items.iter().all(|i| i.operation == Operation::Add));

        let again = poll_source(&c, &out.cursor).unwrap();
        assert!(again.items.is_empty());
        assert_eq!(again.cursor, out.cursor);

        fs::remove_file(dir.path().join("a.txt")).unwrap();
        let after = poll_source(&c, &out.cursor).unwrap();
        assert_eq!(after.items.len(), 1);
        assert_eq!(after.items[0].operation, Operation::Delete);
        assert!(after.items[0].payload.is_empty());
    }

    #[test]
    fn missing_dir_is_retryable() {
        let c = SourceConfig::new("fs", SourceKind::FileDir, "/nonexistent/ragops");
        let err = poll_source(&c, &SourceCursor::default()).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn feed_malformed_line_quarantined_not_fatal() {
        let body = concat!(
            r#"{"external_id":"1","payload":"one"}"#,
            "\nnot json\n",
            r#"{"external_id":"2","payload":"dHdv","encoding":"base64"}"#,
            "\n",
            r#"{"external_id":"3","payload":"partial"}"#
        );
        let c = SourceConfig::new("feed", SourceKind::JsonlFeed, "");
        let out = parse_feed(&c, body, &SourceCursor::default(), ts("2024-01-01"));
        assert_eq!(out.items.len(), 2);
        assert_eq!(out.items[1].payload, b"two");
        assert_eq!(out.quarantined.len(), 1);
        assert_eq!(out.cursor.position, 3);
        let again = parse_feed(&c, body, &out.cursor, ts("2024-01-01"));
        assert!(again.items.is_empty());
    }
}
