//! Trace recording, lineage reconstruction and windowed metrics.
//!
//! Producers hand events to a bounded channel; a single writer thread appends
//! them to the hash-chained trace log. When the channel is full the event is
//! dropped whole and counted. Bulky payloads (prompts, drafts) are written
//! synchronously to a separate append-only payload log and referenced by offset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use crossbeam::channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datalake::{DataLake, VersionStatus};
use crate::retrieval::chunking::parse_chunk_id;
use crate::text::sha256_hex;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("payload digest mismatch at offset {0}")]
    PayloadCorrupt(u64),
    #[error("trace storage: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub pipeline_version: String,
    pub index_epoch: u64,
    pub lake_seq: u64,
    pub embedder_id: String,
    pub llm_id: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStatus {
    #[default]
    Ok,
    Degraded,
    Rejected,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadRef {
    pub offset: u64,
    pub len: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub trace_id: String,
    pub span_id: String,
    pub parent_span: Option<String>,
    pub component: String,
    pub operation: String,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub input_digest: String,
    pub output_digest: String,
    #[serde(default)]
    pub payload_ref: Option<PayloadRef>,
    pub versions: Versions,
    #[serde(default)]
    pub status: SpanStatus,
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
}

impl TraceEvent {
    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).and_then(Value::as_str)
    }

    pub fn attr_strings(&self, key: &str) -> Vec<String> {
        self.attributes
            .get(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default()
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attributes.get(key).and_then(Value::as_f64)
    }

    pub fn duration_ms(&self) -> f64 {
        (self.ended_at - self.started_at).num_microseconds().unwrap_or(0) as f64 / 1000.0
    }
}

/// A trace record as stored: the event plus its position in the hash chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEvent {
    pub seq: u64,
    pub prev_digest: String,
    pub digest: String,
    pub event: TraceEvent,
}

fn chain_digest(prev: &str, event: &TraceEvent) -> String {
    let body = serde_json::to_vec(event).unwrap_or_default();
    let mut buf = Vec::with_capacity(prev.len() + body.len());
    buf.extend_from_slice(prev.as_bytes());
    buf.extend_from_slice(&body);
    sha256_hex(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub name: String,
    pub at: DateTime<Utc>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

/// Nearest-rank percentile of sorted values: `sorted[ceil(p·n) − 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn stats(values: &[f64]) -> Stats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Stats {
        count: v.len(),
        mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
        p50: percentile(&v, 0.5),
        p95: percentile(&v, 0.95),
        max: v.last().copied(),
    }
}

pub const METRIC_TRACE_DROPPED: &str = "trace.dropped";

/// Metrics that exist from startup even before their first sample.
pub const BUILTIN_METRICS: &[&str] = &[
    "latency.answer_ms",
    "latency.enhance_ms",
    "latency.plan_ms",
    "latency.retrieve_ms",
    "latency.rerank_ms",
    "latency.prompt_ms",
    "latency.generate_ms",
    "latency.validate_ms",
    "answer.faithfulness",
    "answer.grounded",
    "answer.iterations",
    "route.degraded",
    METRIC_TRACE_DROPPED,
];

#[derive(Default)]
struct Store {
    events: Vec<StoredEvent>,
    by_trace: BTreeMap<String, Vec<usize>>,
    by_response: BTreeMap<String, String>,
    metrics: BTreeMap<String, Vec<MetricSample>>,
    head: String,
    file: Option<File>,
    metrics_file: Option<File>,
}

impl Store {
    fn append(&mut self, event: TraceEvent) -> std::io::Result<()> {
        let digest = chain_digest(&self.head, &event);
        let stored = StoredEvent {
            seq: self.events.len() as u64 + 1,
            prev_digest: self.head.clone(),
            digest: digest.clone(),
            event,
        };
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&stored).map_err(std::io::Error::other)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.head = digest;
        self.index(stored);
        Ok(())
    }

    fn index(&mut self, stored: StoredEvent) {
        let i = self.events.len();
        self.by_trace.entry(stored.event.trace_id.clone()).or_default().push(i);
        if let Some(r) = stored.event.attr_str("response_id") {
            if stored.event.parent_span.is_none() {
                self.by_response.insert(r.to_string(), stored.event.trace_id.clone());
            }
        }
        self.head = stored.digest.clone();
        self.events.push(stored);
    }

    fn add_metric(&mut self, s: MetricSample) -> std::io::Result<()> {
        if let Some(f) = self.metrics_file.as_mut() {
            let mut line = serde_json::to_vec(&s).map_err(std::io::Error::other)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.metrics.entry(s.name.clone()).or_default().push(s);
        Ok(())
    }
}

enum Msg {
    Event(Box<TraceEvent>),
    Metric(MetricSample),
    Flush(Sender<()>),
    Shutdown,
}

struct PayloadLog {
    file: Option<File>,
    mem: Vec<u8>,
    len: u64,
}

struct Inner {
    tx: Sender<Msg>,
    store: Arc<RwLock<Store>>,
    payloads: Mutex<PayloadLog>,
    dropped: AtomicU64,
    accepted: AtomicU64,
    worker: Mutex<Option<JoinHandle<()>>>,
    dir: Option<PathBuf>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        let _ = self.tx.send(Msg::Shutdown);
        if let Some(h) = self.worker.lock().take() {
            let _ = h.join();
        }
    }
}

/// Cloneable handle to the trace layer.
#[derive(Clone)]
pub struct Tracer {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tracer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracer")
            .field("dir", &self.inner.dir)
            .field("dropped", &self.dropped())
            .finish()
    }
}

pub const DEFAULT_BUFFER: usize = 8192;
const TRACE_FILE: &str = "traces.jsonl";
const METRICS_FILE: &str = "metrics.jsonl";
const PAYLOAD_FILE: &str = "payloads.bin";

impl Tracer {
    pub fn in_memory(buffer: usize) -> Self {
        Self::start(Store::default(), PayloadLog { file: None, mem: Vec::new(), len: 0 }, buffer, None)
    }

    /// Open (or create) trace storage under `dir`, loading existing records.
    pub fn open(dir: impl AsRef<Path>, buffer: usize) -> Result<Self, TraceError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut store = Store::default();
        let trace_path = dir.join(TRACE_FILE);
        if trace_path.exists() {
            for line in BufReader::new(File::open(&trace_path)?).lines() {
                let line = line?;
                // a torn final line from a crash is skipped
                if let Ok(stored) = serde_json::from_str::<StoredEvent>(&line) {
                    store.index(stored);
                }
            }
        }
        let metrics_path = dir.join(METRICS_FILE);
        if metrics_path.exists() {
            for line in BufReader::new(File::open(&metrics_path)?).lines() {
                if let Ok(s) = serde_json::from_str::<MetricSample>(&line?) {
                    store.metrics.entry(s.name.clone()).or_default().push(s);
                }
            }
        }
        store.file = Some(OpenOptions::new().create(true).append(true).open(&trace_path)?);
        store.metrics_file = Some(OpenOptions::new().create(true).append(true).open(&metrics_path)?);
        let pfile = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(dir.join(PAYLOAD_FILE))?;
        let len = pfile.metadata()?.len();
        Ok(Self::start(
            store,
            PayloadLog {
                file: Some(pfile),
                mem: Vec::new(),
                len,
            },
            buffer,
            Some(dir),
        ))
    }

    fn start(store: Store, payloads: PayloadLog, buffer: usize, dir: Option<PathBuf>) -> Self {
        let (tx, rx) = bounded(buffer.max(1));
        let store = Arc::new(RwLock::new(store));
        let worker_store = store.clone();
        let worker = std::thread::Builder::new()
            .name("trace-writer".into())
            .spawn(move || writer_loop(rx, worker_store))
            .expect("spawn trace writer");
        Self {
            inner: Arc::new(Inner {
                tx,
                store,
                payloads: Mutex::new(payloads),
                dropped: AtomicU64::new(0),
                accepted: AtomicU64::new(0),
                worker: Mutex::new(Some(worker)),
                dir,
            }),
        }
    }

    /// Enqueue an event. Never blocks; a full buffer drops the event and counts it.
    pub fn record(&self, event: TraceEvent) {
        match self.inner.tx.try_send(Msg::Event(Box::new(event))) {
            Ok(()) => {
                self.inner.accepted.fetch_add(1, Ordering::Relaxed);
            }
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.inner.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn record_metric(&self, name: &str, value: f64, at: DateTime<Utc>) {
        let s = MetricSample {
            name: name.to_string(),
            at,
            value,
        };
        if self.inner.tx.try_send(Msg::Metric(s)).is_err() {
            self.inner.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    pub fn accepted(&self) -> u64 {
        self.inner.accepted.load(Ordering::Relaxed)
    }

    /// Block until every event enqueued before this call is stored.
    pub fn flush(&self) {
        let (tx, rx) = bounded(1);
        if self.inner.tx.send(Msg::Flush(tx)).is_ok() {
            let _ = rx.recv();
        }
    }

    /// Append a payload and return its reference. Synchronous.
    pub fn put_payload(&self, bytes: &[u8]) -> Result<PayloadRef, TraceError> {
        let mut log = self.inner.payloads.lock();
        let offset = log.len;
        match log.file.as_mut() {
            Some(f) => f.write_all(bytes)?,
            None => log.mem.extend_from_slice(bytes),
        }
        log.len += bytes.len() as u64;
        Ok(PayloadRef {
            offset,
            len: bytes.len() as u64,
            digest: sha256_hex(bytes),
        })
    }

    /// Read a payload back, verifying its digest.
    pub fn get_payload(&self, r: &PayloadRef) -> Result<Vec<u8>, TraceError> {
        let mut log = self.inner.payloads.lock();
        let mut buf = vec![0u8; r.len as usize];
        if r.offset + r.len > log.len {
            return Err(TraceError::NotFound(format!("payload at {}", r.offset)));
        }
        match log.file.as_mut() {
            Some(f) => {
                f.seek(SeekFrom::Start(r.offset))?;
                f.read_exact(&mut buf)?;
            }
            None => buf.copy_from_slice(&log.mem[r.offset as usize..(r.offset + r.len) as usize]),
        }
        if sha256_hex(&buf) != r.digest {
            return Err(TraceError::PayloadCorrupt(r.offset));
        }
        Ok(buf)
    }

    pub fn event_count(&self) -> usize {
        self.inner.store.read().events.len()
    }

    pub fn events(&self) -> Vec<StoredEvent> {
        self.inner.store.read().events.clone()
    }

    /// Re-derive every digest in the chain; returns the first broken sequence number.
    pub fn verify_chain(&self) -> Result<(), u64> {
        let store = self.inner.store.read();
        let mut prev = String::new();
        for s in &store.events {
            if s.prev_digest != prev || chain_digest(&prev, &s.event) != s.digest {
                return Err(s.seq);
            }
            prev = s.digest.clone();
        }
        Ok(())
    }

    pub fn trace(&self, trace_id: &str) -> Result<TraceTree, TraceError> {
        let store = self.inner.store.read();
        let idx = store
            .by_trace
            .get(trace_id)
            .ok_or_else(|| TraceError::NotFound(format!("trace {trace_id}")))?;
        let events: Vec<&StoredEvent> = idx.iter().map(|&i| &store.events[i]).collect();
        Ok(TraceTree::build(trace_id, &events))
    }

    pub fn trace_for_response(&self, response_id: &str) -> Option<String> {
        self.inner.store.read().by_response.get(response_id).cloned()
    }

    /// Root spans of completed answers, optionally within `[from, to)`.
    pub fn responses(&self, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> Vec<ResponseRecord> {
        let store = self.inner.store.read();
        store
            .by_response
            .values()
            .filter_map(|t| store.by_trace.get(t))
            .filter_map(|ix| {
                ix.iter()
                    .map(|&i| &store.events[i].event)
                    .find(|e| e.parent_span.is_none() && e.attr_str("response_id").is_some())
            })
            .filter(|e| from.is_none_or(|f| e.started_at >= f) && to.is_none_or(|t| e.started_at < t))
            .map(ResponseRecord::from_root)
            .collect::<BTreeMap<_, _>>()
            .into_values()
            .collect()
    }

    pub fn metric_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = BUILTIN_METRICS.iter().map(|s| s.to_string()).collect();
        names.extend(self.inner.store.read().metrics.keys().cloned());
        names
    }

    /// Exact statistics over samples with `from <= at < to`.
    pub fn metrics_between(&self, name: &str, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<Stats, TraceError> {
        if name == METRIC_TRACE_DROPPED {
            let d = self.dropped() as f64;
            return Ok(stats(&[d]));
        }
        let store = self.inner.store.read();
        match store.metrics.get(name) {
            Some(samples) => {
                let vals: Vec<f64> = samples
                    .iter()
                    .filter(|s| s.at >= from && s.at < to)
                    .map(|s| s.value)
                    .collect();
                Ok(stats(&vals))
            }
            None if BUILTIN_METRICS.contains(&name) => Ok(stats(&[])),
            None => Err(TraceError::NotFound(format!("metric {name}"))),
        }
    }

    /// Statistics over the trailing `window` ending at `now`.
    pub fn metrics_window(&self, name: &str, window: chrono::Duration, now: DateTime<Utc>) -> Result<Stats, TraceError> {
        self.metrics_between(name, now - window, now + chrono::Duration::microseconds(1))
    }

    /// Lineage of a response, resolved against the lake as of the trace's lake_seq.
    pub fn lineage(&self, response_id: &str, lake: &DataLake) -> Result<LineageGraph, TraceError> {
        let trace_id = self
            .trace_for_response(response_id)
            .ok_or_else(|| TraceError::NotFound(format!("response {response_id}")))?;
        let tree = self.trace(&trace_id)?;
        let root = tree
            .spans
            .iter()
            .find(|s| s.event.parent_span.is_none() && s.event.attr_str("response_id") == Some(response_id))
            .ok_or_else(|| TraceError::NotFound(format!("root span of {response_id}")))?;
        let e = &root.event;
        let prompt = match e.payload_ref.as_ref() {
            Some(r) => Some(String::from_utf8_lossy(&self.get_payload(r)?).into_owned()),
            None => None,
        };
        let chunk_ids = e.attr_strings("citations");
        let retained = tree
            .spans
            .iter()
            .rev()
            .find(|s| s.event.component == "prompt")
            .map(|s| s.event.attr_strings("retained"))
            .unwrap_or_default();
        let lake_seq = e.versions.lake_seq;
        let mut documents = Vec::new();
        let mut unresolved = Vec::new();
        for id in &chunk_ids {
            match parse_chunk_id(id) {
                Some((doc_key, version, _)) if lake.live_at(doc_key, lake_seq) == Some(version) => {
                    let status_now = lake
                        .version(doc_key, version)
                        .map(|v| v.status)
                        .unwrap_or(VersionStatus::Archived);
                    let link = DocumentLink {
                        chunk_id: id.clone(),
                        doc_key: doc_key.to_string(),
                        version,
                        status_now,
                    };
                    documents.push(link);
                }
                _ => unresolved.push(id.clone()),
            }
        }
        let rail_outcomes = tree
            .spans
            .iter()
            .filter_map(|s| s.event.attributes.get("rail_outcomes").cloned())
            .collect();
        Ok(LineageGraph {
            response_id: response_id.to_string(),
            trace_id,
            query: e.attr_str("query").unwrap_or_default().to_string(),
            prompt,
            chunk_ids,
            retained_hits: retained,
            documents,
            unresolved,
            rail_outcomes,
            versions: e.versions.clone(),
        })
    }

    /// Write the full trace log as JSON lines to `out`.
    pub fn export(&self, mut out: impl Write) -> std::io::Result<usize> {
        let store = self.inner.store.read();
        for s in &store.events {
            serde_json::to_writer(&mut out, s).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(store.events.len())
    }
}

fn writer_loop(rx: Receiver<Msg>, store: Arc<RwLock<Store>>) {
    while let Ok(msg) = rx.recv() {
        match msg {
            Msg::Event(e) => {
                if let Err(err) = store.write().append(*e) {
                    log::error!("trace append failed: {err}");
                }
            }
            Msg::Metric(s) => {
                if let Err(err) = store.write().add_metric(s) {
                    log::error!("metric append failed: {err}");
                }
            }
            Msg::Flush(done) => {
                let mut st = store.write();
                if let Some(f) = st.file.as_mut() {
                    let _ = f.flush();
                }
                if let Some(f) = st.metrics_file.as_mut() {
                    let _ = f.flush();
                }
                drop(st);
                let _ = done.send(());
            }
            Msg::Shutdown => break,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanNode {
    pub depth: usize,
    /// Parent span id given but absent from this trace.
    pub orphan: bool,
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTree {
    pub trace_id: String,
    /// Spans in depth-first order, siblings by `started_at`.
    pub spans: Vec<SpanNode>,
}

impl TraceTree {
    fn build(trace_id: &str, events: &[&StoredEvent]) -> Self {
        let ids: BTreeSet<&str> = events.iter().map(|e| e.event.span_id.as_str()).collect();
        let mut children: BTreeMap<Option<&str>, Vec<&StoredEvent>> = BTreeMap::new();
        let mut orphans = BTreeSet::new();
        for e in events {
            let parent = e.event.parent_span.as_deref().filter(|p| ids.contains(p));
            if e.event.parent_span.is_some() && parent.is_none() {
                orphans.insert(e.event.span_id.as_str());
            }
            children.entry(parent).or_default().push(e);
        }
        for v in children.values_mut() {
            v.sort_by(|a, b| a.event.started_at.cmp(&b.event.started_at).then(a.seq.cmp(&b.seq)));
        }
        let mut spans = Vec::with_capacity(events.len());
        let mut visited = BTreeSet::new();
        fn walk<'a>(
            parent: Option<&'a str>,
            depth: usize,
            children: &BTreeMap<Option<&'a str>, Vec<&'a StoredEvent>>,
            orphans: &BTreeSet<&str>,
            visited: &mut BTreeSet<&'a str>,
            out: &mut Vec<SpanNode>,
        ) {
            for e in children.get(&parent).into_iter().flatten() {
                if !visited.insert(e.event.span_id.as_str()) {
                    continue;
                }
                out.push(SpanNode {
                    depth,
                    orphan: orphans.contains(e.event.span_id.as_str()),
                    event: e.event.clone(),
                });
                walk(Some(e.event.span_id.as_str()), depth + 1, children, orphans, visited, out);
            }
        }
        walk(None, 0, &children, &orphans, &mut visited, &mut spans);
        // cycles among parent links leave spans unreachable from a root
        for e in events {
            if !visited.contains(e.event.span_id.as_str()) {
                spans.push(SpanNode {
                    depth: 0,
                    orphan: true,
                    event: e.event.clone(),
                });
            }
        }
        Self {
            trace_id: trace_id.to_string(),
            spans,
        }
    }

    pub fn components(&self) -> BTreeSet<String> {
        self.spans.iter().map(|s| s.event.component.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentLink {
    pub chunk_id: String,
    pub doc_key: String,
    pub version: u32,
    pub status_now: VersionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageGraph {
    pub response_id: String,
    pub trace_id: String,
    pub query: String,
    /// Prompt bytes recovered from the payload log.
    pub prompt: Option<String>,
    /// Citations of the response.
    pub chunk_ids: Vec<String>,
    /// Context items retained for the final prompt, as recorded by the prompt span.
    pub retained_hits: Vec<String>,
    pub documents: Vec<DocumentLink>,
    /// Citations that do not resolve to a version live at the trace's lake_seq.
    pub unresolved: Vec<String>,
    pub rail_outcomes: Vec<Value>,
    pub versions: Versions,
}

impl LineageGraph {
    pub fn is_resolved(&self) -> bool {
        self.unresolved.is_empty()
    }
}

/// Summary of one answered query, read from its root span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub response_id: String,
    pub trace_id: String,
    pub query_id: Option<String>,
    pub query: String,
    pub answer: String,
    pub retrieved: Vec<String>,
    pub citations: Vec<String>,
    pub faithfulness: Option<f64>,
    pub grounded: bool,
    pub latency_ms: f64,
    pub pipeline_version: String,
    pub served: bool,
    pub started_at: DateTime<Utc>,
}

impl ResponseRecord {
    fn from_root(e: &TraceEvent) -> (String, Self) {
        let r = Self {
            response_id: e.attr_str("response_id").unwrap_or_default().to_string(),
            trace_id: e.trace_id.clone(),
            query_id: e.attr_str("query_id").map(str::to_string),
            query: e.attr_str("query").unwrap_or_default().to_string(),
            answer: e.attr_str("answer").unwrap_or_default().to_string(),
            retrieved: e.attr_strings("retrieved"),
            citations: e.attr_strings("citations"),
            faithfulness: e.attr_f64("faithfulness"),
            grounded: e.attributes.get("grounded").and_then(Value::as_bool).unwrap_or(false),
            latency_ms: e.duration_ms(),
            pipeline_version: e.versions.pipeline_version.clone(),
            served: e.attributes.get("served").and_then(Value::as_bool).unwrap_or(true),
            started_at: e.started_at,
        };
        (format!("{}|{}", e.started_at.to_rfc3339(), r.response_id), r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ev(trace: &str, span: &str, parent: Option<&str>, t: i64) -> TraceEvent {
        TraceEvent {
            trace_id: trace.into(),
            span_id: span.into(),
            parent_span: parent.map(str::to_string),
            component: span.into(),
            operation: "op".into(),
            started_at: Utc.timestamp_opt(t, 0).unwrap(),
            ended_at: Utc.timestamp_opt(t + 1, 0).unwrap(),
            input_digest: "i".into(),
            output_digest: "o".into(),
            payload_ref: None,
            versions: Versions::default(),
            status: SpanStatus::Ok,
            attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn record_and_read_back() {
        let t = Tracer::in_memory(16);
        let e = ev("t1", "root", None, 10);
        t.record(e.clone());
        t.flush();
        let tree = t.trace("t1").unwrap();
        assert_eq!(tree.spans[0].event, e);
        assert!(matches!(t.trace("nope"), Err(TraceError::NotFound(_))));
        assert!(t.verify_chain().is_ok());
    }

    #[test]
    fn orphan_flagged() {
        let t = Tracer::in_memory(16);
        t.record(ev("t", "root", None, 1));
        t.record(ev("t", "child", Some("root"), 2));
        t.record(ev("t", "lost", Some("missing"), 3));
        t.flush();
        let tree = t.trace("t").unwrap();
        assert_eq!(tree.spans.len(), 3);
        let lost = tree.spans.iter().find(|s| s.event.span_id == "lost").unwrap();
        assert!(lost.orphan);
        assert_eq!(tree.spans[1].depth, 1);
    }

    #[test]
    fn concurrent_records_accounted() {
        let t = Tracer::in_memory(64);
        std::thread::scope(|s| {
            for w in 0..8 {
                let t = t.clone();
                s.spawn(move || {
                    for i in 0..1250 {
                        t.record(ev(&format!("w{w}"), &format!("s{i}"), None, i));
                    }
                });
            }
        });
        t.flush();
        assert_eq!(t.event_count() as u64 + t.dropped(), 10_000);
        assert!(t.verify_chain().is_ok());
    }

    #[test]
    fn payload_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tracer::open(dir.path(), 16).unwrap();
        let a = t.put_payload(b"first prompt").unwrap();
        let b = t.put_payload("second ✓".as_bytes()).unwrap();
        assert_eq!(t.get_payload(&a).unwrap(), b"first prompt");
        assert_eq!(t.get_payload(&b).unwrap(), "second ✓".as_bytes());
        let mut bad = b.clone();
        bad.digest = "00".into();
        assert!(matches!(t.get_payload(&bad), Err(TraceError::PayloadCorrupt(_))));
    }

    #[test]
    fn persistence_reloads_chain() {
        let dir = tempfile::tempdir().unwrap();
        {
            let t = Tracer::open(dir.path(), 16).unwrap();
            t.record(ev("t", "a", None, 1));
            t.record(ev("t", "b", Some("a"), 2));
            t.flush();
        }
        let t = Tracer::open(dir.path(), 16).unwrap();
        assert_eq!(t.event_count(), 2);
        t.record(ev("t2", "c", None, 3));
        t.flush();
        assert!(t.verify_chain().is_ok());
    }

    #[test]
    fn metric_stats() {
        let t = Tracer::in_memory(16);
        let at = |s| Utc.timestamp_opt(s, 0).unwrap();
        for (i, v) in [10.0, 20.0, 30.0].iter().enumerate() {
            t.record_metric("latency.answer_ms", *v, at(100 + i as i64));
        }
        t.flush();
        let s = t.metrics_between("latency.answer_ms", at(0), at(1000)).unwrap();
        assert_eq!((s.count, s.mean, s.p50, s.max), (3, Some(20.0), Some(20.0), Some(30.0)));
        let empty = t.metrics_between("latency.answer_ms", at(0), at(50)).unwrap();
        assert_eq!((empty.count, empty.mean), (0, None));
        assert!(t.metrics_between("no.such", at(0), at(1)).is_err());
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        let vals: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let s = stats(&vals);
        assert_eq!(s.p95, Some(sorted[94]));
        assert_eq!(s.p50, Some(sorted[49]));
    }
}
