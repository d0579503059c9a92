//! Versioned, append-only store of verified documents.
//!
//! Every write appends a [`LakeOp`] with a fresh global sequence number. Version
//! records are never modified after they are written: archival is expressed by
//! a later op moving the live pointer, and rollback appends a new version that
//! copies the content of an older one.
//!
//! On disk the lake is a single log file (`lake.log`): a magic header followed
//! by length-prefixed JSON records. A small JSON sidecar (`lake.index.json`)
//! mirrors the live map for inspection and is rewritten after every write.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ingestion::{DocMetadata, NormalizedDocument, Operation};
use crate::text::ContentHash;
use crate::verification::{Decision, VerificationReport};

pub const LOG_MAGIC: &[u8; 16] = b"RAGOPS-LAKE-v1\n\0";
const LOG_FILE: &str = "lake.log";
const SIDECAR_FILE: &str = "lake.index.json";

#[derive(Debug, Error)]
pub enum LakeError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("role {role:?} may not read {doc_key}")]
    AccessDenied { doc_key: String, role: Option<String> },
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("invalid rollback target: {0}")]
    InvalidTarget(String),
    #[error("sequence {requested} is beyond current lake_seq {current}")]
    OutOfRange { requested: u64, current: u64 },
    #[error("corrupt lake log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Live,
    Archived,
    DeletedTombstone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VersionOrigin {
    Ingest,
    Rollback { from_version: u32 },
    Amend { reason: String },
    Tombstone,
}

/// Immutable record of one version as written to the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub doc_key: String,
    pub version: u32,
    pub text: String,
    pub metadata: DocMetadata,
    pub acl: Vec<String>,
    pub content_hash: ContentHash,
    pub lake_seq: u64,
    pub fetched_at: Option<DateTime<Utc>>,
    pub origin: VersionOrigin,
}

/// A version together with its status as of the reading snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVersion {
    pub doc_key: String,
    pub version: u32,
    pub text: String,
    pub metadata: DocMetadata,
    pub acl: Vec<String>,
    pub content_hash: ContentHash,
    pub status: VersionStatus,
    pub lake_seq: u64,
    pub fetched_at: Option<DateTime<Utc>>,
}

impl DocumentVersion {
    fn from_record(r: &VersionRecord, status: VersionStatus) -> Self {
        Self {
            doc_key: r.doc_key.clone(),
            version: r.version,
            text: r.text.clone(),
            metadata: r.metadata.clone(),
            acl: r.acl.clone(),
            content_hash: r.content_hash.clone(),
            status,
            lake_seq: r.lake_seq,
            fetched_at: r.fetched_at,
        }
    }

    pub fn readable_by(&self, role: Option<&str>) -> bool {
        acl_allows(&self.acl, role)
    }
}

/// Empty ACL means public; otherwise the role must be listed.
pub fn acl_allows(acl: &[String], role: Option<&str>) -> bool {
    acl.is_empty() || role.is_some_and(|r| acl.iter().any(|a| a == r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LakeOp {
    /// New live version; any previous live version becomes archived.
    Upsert { record: VersionRecord },
    /// Live version archived without a replacement.
    Archive {
        lake_seq: u64,
        doc_key: String,
        version: u32,
        reason: String,
    },
    /// Live version archived and a tombstone version appended.
    Delete { record: VersionRecord },
}

impl LakeOp {
    pub fn seq(&self) -> u64 {
        match self {
            Self::Upsert { record } | Self::Delete { record } => record.lake_seq,
            Self::Archive { lake_seq, .. } => *lake_seq,
        }
    }

    fn entry(&self) -> ChangeEntry {
        match self {
            Self::Upsert { record } => ChangeEntry {
                lake_seq: record.lake_seq,
                doc_key: record.doc_key.clone(),
                version: record.version,
                change: ChangeKind::Upsert,
            },
            Self::Archive {
                lake_seq,
                doc_key,
                version,
                ..
            } => ChangeEntry {
                lake_seq: *lake_seq,
                doc_key: doc_key.clone(),
                version: *version,
                change: ChangeKind::Archive,
            },
            Self::Delete { record } => ChangeEntry {
                lake_seq: record.lake_seq,
                doc_key: record.doc_key.clone(),
                version: record.version,
                change: ChangeKind::Delete,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Upsert,
    Archive,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEntry {
    pub lake_seq: u64,
    pub doc_key: String,
    pub version: u32,
    pub change: ChangeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub from_seq: u64,
    pub to_seq: u64,
    pub entries: Vec<ChangeEntry>,
}

/// Live documents as of a sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeSnapshot {
    pub lake_seq: u64,
    pub live: BTreeMap<String, DocumentVersion>,
}

impl LakeSnapshot {
    /// Replay a change set on top of this snapshot.
    pub fn apply(&mut self, cs: &ChangeSet, lake: &DataLake) -> Result<(), LakeError> {
        if cs.from_seq != self.lake_seq {
            return Err(LakeError::OutOfRange {
                requested: cs.from_seq,
                current: self.lake_seq,
            });
        }
        for e in &cs.entries {
            match e.change {
                ChangeKind::Upsert => {
                    let rec = lake
                        .record(&e.doc_key, e.version)
                        .ok_or_else(|| LakeError::NotFound(format!("{}@{}", e.doc_key, e.version)))?;
                    self.live.insert(
                        e.doc_key.clone(),
                        DocumentVersion::from_record(rec, VersionStatus::Live),
                    );
                }
                ChangeKind::Archive | ChangeKind::Delete => {
                    self.live.remove(&e.doc_key);
                }
            }
        }
        self.lake_seq = cs.to_seq;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MultipleLive { doc_key: String, versions: Vec<u32> },
    LiveIsTombstone { doc_key: String, version: u32 },
    VersionGap { doc_key: String, expected: u32, found: u32 },
    SequenceNotIncreasing { at: u64, previous: u64 },
    DanglingChunk { chunk_id: String, doc_key: String, version: u32, reason: String },
    DanglingTicket { ticket_id: String, doc_key: String, version: u32 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub lake_seq: u64,
    pub documents: usize,
    pub chunks_checked: usize,
    pub tickets_checked: usize,
    pub violations: Vec<Violation>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// References from other modules that must point at live versions.
#[derive(Debug, Clone, Default)]
pub struct IntegrityInputs {
    /// `(chunk_id, doc_key, version)` for every indexed chunk.
    pub chunks: Vec<(String, String, u32)>,
    /// `(ticket_id, doc_key, version)` for every side of every open ticket.
    pub tickets: Vec<(String, String, u32)>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    lake_seq: u64,
    records: usize,
    live: BTreeMap<String, u32>,
}

struct LogWriter {
    dir: PathBuf,
    file: File,
}

impl LogWriter {
    fn append(&mut self, op: &LakeOp) -> io::Result<()> {
        let body = serde_json::to_vec(op).map_err(io::Error::other)?;
        let mut buf = Vec::with_capacity(body.len() + 4);
        buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
        buf.extend_from_slice(&body);
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }

    fn write_sidecar(&self, sidecar: &Sidecar) -> io::Result<()> {
        let tmp = self.dir.join(format!("{SIDECAR_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(sidecar).map_err(io::Error::other)?)?;
        std::fs::rename(tmp, self.dir.join(SIDECAR_FILE))
    }
}

/// The data lake. Single writer; readers take `&self`.
#[derive(Default)]
pub struct DataLake {
    records: Vec<VersionRecord>,
    by_doc: HashMap<String, Vec<usize>>,
    live: HashMap<String, u32>,
    /// Per document: `(lake_seq, live version after the op)`.
    live_history: HashMap<String, Vec<(u64, Option<u32>)>>,
    ops: Vec<LakeOp>,
    seq: u64,
    writer: Option<LogWriter>,
}

impl std::fmt::Debug for DataLake {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataLake")
            .field("lake_seq", &self.seq)
            .field("records", &self.records.len())
            .field("live", &self.live.len())
            .finish()
    }
}

impl DataLake {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a persistent lake in `dir`. A torn trailing record is
    /// truncated away.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, LakeError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(LOG_FILE);
        let mut lake = Self::default();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            if bytes.len() < LOG_MAGIC.len() || &bytes[..LOG_MAGIC.len()] != LOG_MAGIC {
                return Err(LakeError::Corrupt("bad magic header".into()));
            }
            let mut pos = LOG_MAGIC.len();
            let mut ops = Vec::new();
            while pos + 4 <= bytes.len() {
                let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                if pos + 4 + len > bytes.len() {
                    break;
                }
                let op: LakeOp = serde_json::from_slice(&bytes[pos + 4..pos + 4 + len])
                    .map_err(|e| LakeError::Corrupt(format!("record at byte {pos}: {e}")))?;
                ops.push(op);
                pos += 4 + len;
            }
            if pos < bytes.len() {
                log::warn!("truncating torn record at byte {pos} of {}", path.display());
                OpenOptions::new().write(true).open(&path)?.set_len(pos as u64)?;
            }
            for op in ops {
                lake.replay(op);
            }
        } else {
            let mut f = File::create(&path)?;
            f.write_all(LOG_MAGIC)?;
            f.sync_all()?;
        }
        let file = OpenOptions::new().append(true).open(&path)?;
        lake.writer = Some(LogWriter { dir, file });
        lake.persist_sidecar()?;
        Ok(lake)
    }

    /// Rebuild a lake from raw ops without validating them; used by recovery
    /// tooling and to examine damaged histories with [`DataLake::integrity_check`].
    pub fn from_ops_unchecked(ops: Vec<LakeOp>) -> Self {
        let mut lake = Self::default();
        for op in ops {
            lake.replay(op);
        }
        lake
    }

    fn replay(&mut self, op: LakeOp) {
        let seq = op.seq();
        match &op {
            LakeOp::Upsert { record } => {
                self.push_record(record.clone());
                self.live.insert(record.doc_key.clone(), record.version);
                self.note_live(&record.doc_key, seq, Some(record.version));
            }
            LakeOp::Archive { doc_key, .. } => {
                self.live.remove(doc_key);
                self.note_live(doc_key, seq, None);
            }
            LakeOp::Delete { record } => {
                self.push_record(record.clone());
                self.live.remove(&record.doc_key);
                self.note_live(&record.doc_key, seq, None);
            }
        }
        self.seq = self.seq.max(seq);
        self.ops.push(op);
    }

    fn push_record(&mut self, r: VersionRecord) {
        self.by_doc
            .entry(r.doc_key.clone())
            .or_default()
            .push(self.records.len());
        self.records.push(r);
    }

    fn note_live(&mut self, doc_key: &str, seq: u64, v: Option<u32>) {
        self.live_history
            .entry(doc_key.to_string())
            .or_default()
            .push((seq, v));
    }

    fn write(&mut self, op: LakeOp) -> Result<(), LakeError> {
        if let Some(w) = self.writer.as_mut() {
            w.append(&op)?;
        }
        self.replay(op);
        self.persist_sidecar()
    }

    fn persist_sidecar(&self) -> Result<(), LakeError> {
        if let Some(w) = &self.writer {
            w.write_sidecar(&Sidecar {
                format_version: 1,
                lake_seq: self.seq,
                records: self.records.len(),
                live: self.live.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            })?;
        }
        Ok(())
    }

    pub fn current_seq(&self) -> u64 {
        self.seq
    }

    pub fn ops(&self) -> &[LakeOp] {
        &self.ops
    }

    fn next_version(&self, doc_key: &str) -> u32 {
        self.by_doc
            .get(doc_key)
            .and_then(|ix| ix.last())
            .map(|&i| self.records[i].version + 1)
            .unwrap_or(1)
    }

    pub(crate) fn record(&self, doc_key: &str, version: u32) -> Option<&VersionRecord> {
        self.by_doc
            .get(doc_key)?
            .iter()
            .map(|&i| &self.records[i])
            .find(|r| r.version == version)
    }

    /// A specific version without an access check, for internal consumers
    /// such as the indexer and lineage resolution.
    pub fn version(&self, doc_key: &str, version: u32) -> Option<DocumentVersion> {
        self.record(doc_key, version)
            .map(|r| DocumentVersion::from_record(r, self.status_of(r)))
    }

    fn status_of(&self, r: &VersionRecord) -> VersionStatus {
        if r.origin == VersionOrigin::Tombstone {
            VersionStatus::DeletedTombstone
        } else if self.live.get(&r.doc_key) == Some(&r.version) {
            VersionStatus::Live
        } else {
            VersionStatus::Archived
        }
    }

    fn new_record(
        &self,
        doc_key: &str,
        text: String,
        metadata: DocMetadata,
        acl: Vec<String>,
        fetched_at: Option<DateTime<Utc>>,
        origin: VersionOrigin,
    ) -> VersionRecord {
        VersionRecord {
            doc_key: doc_key.to_string(),
            version: self.next_version(doc_key),
            content_hash: ContentHash::of(&text),
            text,
            metadata,
            acl,
            lake_seq: self.seq + 1,
            fetched_at,
            origin,
        }
    }

    /// Store an accepted document as the new live version.
    pub fn upsert(
        &mut self,
        doc: &NormalizedDocument,
        report: &VerificationReport,
    ) -> Result<DocumentVersion, LakeError> {
        if !matches!(report.decision, Decision::Accept | Decision::AcceptAsNewVersion) {
            return Err(LakeError::PolicyViolation(format!(
                "cannot store {} with decision {:?}",
                doc.doc_key, report.decision
            )));
        }
        if report.doc_key != doc.doc_key {
            return Err(LakeError::PolicyViolation(format!(
                "report for {} applied to {}",
                report.doc_key, doc.doc_key
            )));
        }
        if doc.operation == Operation::Delete {
            return self.delete(&doc.doc_key);
        }
        let record = self.new_record(
            &doc.doc_key,
            doc.text.clone(),
            doc.metadata.clone(),
            doc.acl.clone(),
            doc.fetched_at,
            VersionOrigin::Ingest,
        );
        let out = DocumentVersion::from_record(&record, VersionStatus::Live);
        self.write(LakeOp::Upsert { record })?;
        Ok(out)
    }

    /// Archive the live version and append a tombstone.
    pub fn delete(&mut self, doc_key: &str) -> Result<DocumentVersion, LakeError> {
        let live = *self
            .live
            .get(doc_key)
            .ok_or_else(|| LakeError::NotFound(format!("{doc_key} has no live version")))?;
        let prev = self.record(doc_key, live).expect("live record exists").clone();
        let record = self.new_record(
            doc_key,
            String::new(),
            DocMetadata {
                source: prev.metadata.source.clone(),
                ..Default::default()
            },
            prev.acl.clone(),
            None,
            VersionOrigin::Tombstone,
        );
        let out = DocumentVersion::from_record(&record, VersionStatus::DeletedTombstone);
        self.write(LakeOp::Delete { record })?;
        Ok(out)
    }

    /// Archive the live version without a replacement (conflict losers).
    pub fn archive(&mut self, doc_key: &str, reason: &str) -> Result<DocumentVersion, LakeError> {
        let live = *self
            .live
            .get(doc_key)
            .ok_or_else(|| LakeError::NotFound(format!("{doc_key} has no live version")))?;
        self.write(LakeOp::Archive {
            lake_seq: self.seq + 1,
            doc_key: doc_key.to_string(),
            version: live,
            reason: reason.to_string(),
        })?;
        Ok(DocumentVersion::from_record(
            self.record(doc_key, live).unwrap(),
            VersionStatus::Archived,
        ))
    }

    /// Append a new version whose content copies `to_version`.
    pub fn rollback(&mut self, doc_key: &str, to_version: u32) -> Result<DocumentVersion, LakeError> {
        let target = self
            .record(doc_key, to_version)
            .ok_or_else(|| LakeError::NotFound(format!("{doc_key}@{to_version}")))?;
        match self.status_of(target) {
            VersionStatus::Live => {
                return Err(LakeError::InvalidTarget(format!("{doc_key}@{to_version} is already live")))
            }
            VersionStatus::DeletedTombstone => {
                return Err(LakeError::InvalidTarget(format!("{doc_key}@{to_version} is a tombstone")))
            }
            VersionStatus::Archived => {}
        }
        let t = target.clone();
        let record = self.new_record(
            doc_key,
            t.text,
            t.metadata,
            t.acl,
            t.fetched_at,
            VersionOrigin::Rollback {
                from_version: to_version,
            },
        );
        let out = DocumentVersion::from_record(&record, VersionStatus::Live);
        self.write(LakeOp::Upsert { record })?;
        Ok(out)
    }

    /// Append a new live version identical to the current one except for one
    /// metadata field.
    pub fn amend_metadata(
        &mut self,
        doc_key: &str,
        key: &str,
        value: Value,
        reason: &str,
    ) -> Result<DocumentVersion, LakeError> {
        let live = *self
            .live
            .get(doc_key)
            .ok_or_else(|| LakeError::NotFound(format!("{doc_key} has no live version")))?;
        let cur = self.record(doc_key, live).unwrap().clone();
        let mut metadata = cur.metadata;
        metadata.extra.insert(key.to_string(), value);
        let record = self.new_record(
            doc_key,
            cur.text,
            metadata,
            cur.acl,
            cur.fetched_at,
            VersionOrigin::Amend {
                reason: reason.to_string(),
            },
        );
        let out = DocumentVersion::from_record(&record, VersionStatus::Live);
        self.write(LakeOp::Upsert { record })?;
        Ok(out)
    }

    pub fn changes_since(&self, seq: u64) -> Result<ChangeSet, LakeError> {
        if seq > self.seq {
            return Err(LakeError::OutOfRange {
                requested: seq,
                current: self.seq,
            });
        }
        let start = self.ops.partition_point(|op| op.seq() <= seq);
        Ok(ChangeSet {
            from_seq: seq,
            to_seq: self.seq,
            entries: self.ops[start..].iter().map(LakeOp::entry).collect(),
        })
    }

    /// Live version of `doc_key` as of `seq`.
    pub fn live_at(&self, doc_key: &str, seq: u64) -> Option<u32> {
        let hist = self.live_history.get(doc_key)?;
        let i = hist.partition_point(|(s, _)| *s <= seq);
        if i == 0 {
            None
        } else {
            hist[i - 1].1
        }
    }

    pub fn snapshot(&self, seq: u64) -> Result<LakeSnapshot, LakeError> {
        if seq > self.seq {
            return Err(LakeError::OutOfRange {
                requested: seq,
                current: self.seq,
            });
        }
        let live = self
            .live_history
            .keys()
            .filter_map(|k| {
                self.live_at(k, seq).map(|v| {
                    (
                        k.clone(),
                        DocumentVersion::from_record(self.record(k, v).unwrap(), VersionStatus::Live),
                    )
                })
            })
            .collect();
        Ok(LakeSnapshot { lake_seq: seq, live })
    }

    pub fn get(
        &self,
        doc_key: &str,
        version: Option<u32>,
        role: Option<&str>,
    ) -> Result<DocumentVersion, LakeError> {
        let v = match version {
            Some(v) => v,
            None => *self
                .live
                .get(doc_key)
                .ok_or_else(|| LakeError::NotFound(format!("{doc_key} has no live version")))?,
        };
        let r = self
            .record(doc_key, v)
            .ok_or_else(|| LakeError::NotFound(format!("{doc_key}@{v}")))?;
        let dv = DocumentVersion::from_record(r, self.status_of(r));
        if !dv.readable_by(role) {
            return Err(LakeError::AccessDenied {
                doc_key: doc_key.to_string(),
                role: role.map(str::to_string),
            });
        }
        Ok(dv)
    }

    /// All versions of a document, oldest first.
    pub fn history(&self, doc_key: &str) -> Vec<DocumentVersion> {
        self.by_doc
            .get(doc_key)
            .map(|ix| {
                ix.iter()
                    .map(|&i| DocumentVersion::from_record(&self.records[i], self.status_of(&self.records[i])))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Live versions ordered by doc_key.
    pub fn live_versions(&self) -> Vec<DocumentVersion> {
        let mut keys: Vec<&String> = self.live.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| DocumentVersion::from_record(self.record(k, self.live[k]).unwrap(), VersionStatus::Live))
            .collect()
    }

    pub fn live_version_of(&self, doc_key: &str) -> Option<u32> {
        self.live.get(doc_key).copied()
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Total bytes held by archived versions.
    pub fn archived_bytes(&self) -> usize {
        self.records
            .iter()
            .filter(|r| self.status_of(r) == VersionStatus::Archived)
            .map(|r| r.text.len())
            .sum()
    }

    /// JSONL of live versions.
    pub fn export_live(&self, mut out: impl Write) -> io::Result<usize> {
        let live = self.live_versions();
        for v in &live {
            serde_json::to_writer(&mut out, v).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(live.len())
    }

    pub fn integrity_check(&self, inputs: &IntegrityInputs) -> IntegrityReport {
        let mut violations = Vec::new();
        let mut prev = 0u64;
        for op in &self.ops {
            if op.seq() <= prev {
                violations.push(Violation::SequenceNotIncreasing {
                    at: op.seq(),
                    previous: prev,
                });
            }
            prev = prev.max(op.seq());
        }
        let mut keys: Vec<&String> = self.by_doc.keys().collect();
        keys.sort();
        for key in keys {
            for (i, &ri) in self.by_doc[key].iter().enumerate() {
                let expected = i as u32 + 1;
                if self.records[ri].version != expected {
                    violations.push(Violation::VersionGap {
                        doc_key: key.clone(),
                        expected,
                        found: self.records[ri].version,
                    });
                    break;
                }
            }
            let live: Vec<u32> = self.by_doc[key]
                .iter()
                .map(|&i| &self.records[i])
                .filter(|r| self.status_of(r) == VersionStatus::Live)
                .map(|r| r.version)
                .collect();
            if live.len() > 1 {
                violations.push(Violation::MultipleLive {
                    doc_key: key.clone(),
                    versions: live,
                });
            }
            if let Some(&v) = self.live.get(key) {
                if self.record(key, v).is_some_and(|r| r.origin == VersionOrigin::Tombstone) {
                    violations.push(Violation::LiveIsTombstone {
                        doc_key: key.clone(),
                        version: v,
                    });
                }
            }
        }
        for (chunk_id, doc_key, version) in &inputs.chunks {
            let reason = match (self.record(doc_key, *version), self.live.get(doc_key)) {
                (None, _) => Some("version does not exist"),
                (Some(_), Some(l)) if l == version => None,
                (Some(_), _) => Some("version is not live"),
            };
            if let Some(reason) = reason {
                violations.push(Violation::DanglingChunk {
                    chunk_id: chunk_id.clone(),
                    doc_key: doc_key.clone(),
                    version: *version,
                    reason: reason.into(),
                });
            }
        }
        for (ticket_id, doc_key, version) in &inputs.tickets {
            if self.live.get(doc_key) != Some(version) {
                violations.push(Violation::DanglingTicket {
                    ticket_id: ticket_id.clone(),
                    doc_key: doc_key.clone(),
                    version: *version,
                });
            }
        }
        IntegrityReport {
            lake_seq: self.seq,
            documents: self.by_doc.len(),
            chunks_checked: inputs.chunks.len(),
            tickets_checked: inputs.tickets.len(),
            violations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::DocMetadata;
    use crate::verification::{Decision, VerificationReport};
    use proptest::prelude::*;

    fn doc(key: &str, text: &str, acl: &[&str]) -> NormalizedDocument {
        NormalizedDocument {
            doc_key: key.into(),
            text: text.into(),
            metadata: DocMetadata {
                source: "kb".into(),
                ..Default::default()
            },
            acl: acl.iter().map(|s| s.to_string()).collect(),
            operation: Operation::Add,
            fetched_at: None,
        }
    }

    fn accept(key: &str) -> VerificationReport {
        VerificationReport::bare(key, Decision::Accept)
    }

    fn put(lake: &mut DataLake, key: &str, text: &str) -> DocumentVersion {
        lake.upsert(&doc(key, text, &[]), &accept(key)).unwrap()
    }

    #[test]
    fn first_and_second_upsert() {
        let mut lake = DataLake::in_memory();
        assert_eq!(put(&mut lake, "k", "one").version, 1);
        let v2 = put(&mut lake, "k", "two");
        assert_eq!(v2.version, 2);
        assert_eq!(lake.get("k", Some(1), None).unwrap().status, VersionStatus::Archived);
        assert_eq!(lake.get("k", None, None).unwrap().status, VersionStatus::Live);
    }

    #[test]
    fn upsert_rejects_non_accept() {
        let mut lake = DataLake::in_memory();
        let r = VerificationReport::bare("k", Decision::DropDuplicate);
        assert!(matches!(
            lake.upsert(&doc("k", "x", &[]), &r),
            Err(LakeError::PolicyViolation(_))
        ));
        assert_eq!(lake.current_seq(), 0);
    }

    #[test]
    fn delete_twice_and_rollback() {
        let mut lake = DataLake::in_memory();
        put(&mut lake, "k", "one");
        let t = lake.delete("k").unwrap();
        assert_eq!(t.status, VersionStatus::DeletedTombstone);
        assert_eq!(t.version, 2);
        assert!(matches!(lake.delete("k"), Err(LakeError::NotFound(_))));
        let back = lake.rollback("k", 1).unwrap();
        assert_eq!(back.version, 3);
        assert_eq!(lake.get("k", None, None).unwrap().text, "one");
    }

    #[test]
    fn rollback_rules() {
        let mut lake = DataLake::in_memory();
        let v1 = lake.upsert(&doc("k", "alpha", &["legal"]), &accept("k")).unwrap();
        put(&mut lake, "k", "beta");
        let v3 = lake.rollback("k", 1).unwrap();
        assert_eq!(v3.version, 3);
        assert_eq!(v3.content_hash, v1.content_hash);
        assert_eq!(v3.acl, vec!["legal"]);
        assert!(matches!(lake.rollback("k", 3), Err(LakeError::InvalidTarget(_))));
        assert!(matches!(lake.rollback("k", 9), Err(LakeError::NotFound(_))));
    }

    #[test]
    fn acl_enforced_on_get() {
        let mut lake = DataLake::in_memory();
        put(&mut lake, "pub", "open text");
        lake.upsert(&doc("sec", "secret", &["legal"]), &accept("sec")).unwrap();
        put(&mut lake, "sec", "secret v2");
        assert!(lake.get("pub", None, None).is_ok());
        assert!(matches!(
            lake.get("sec", Some(1), Some("sales")),
            Err(LakeError::AccessDenied { .. })
        ));
        assert_eq!(lake.get("sec", Some(1), Some("legal")).unwrap().status, VersionStatus::Archived);
    }

    #[test]
    fn changes_since_bounds() {
        let mut lake = DataLake::in_memory();
        put(&mut lake, "a", "1");
        let s = lake.current_seq();
        assert!(lake.changes_since(s).unwrap().entries.is_empty());
        put(&mut lake, "b", "2");
        put(&mut lake, "c", "3");
        put(&mut lake, "a", "4");
        let cs = lake.changes_since(s).unwrap();
        assert_eq!(cs.entries.len(), 3);
        assert!(cs.entries.windows(2).all(|w| w[0].lake_seq < w[1].lake_seq));
        assert!(matches!(lake.changes_since(s + 10), Err(LakeError::OutOfRange { .. })));
    }

    #[test]
    fn integrity_detects_version_gap() {
        let mut lake = DataLake::in_memory();
        put(&mut lake, "k", "one");
        assert!(lake.integrity_check(&IntegrityInputs::default()).is_clean());
        let mut ops = lake.ops().to_vec();
        if let LakeOp::Upsert { record } = &ops[0] {
            let mut r = record.clone();
            r.version = 3;
            r.lake_seq = 2;
            ops.push(LakeOp::Upsert { record: r });
        }
        let broken = DataLake::from_ops_unchecked(ops);
        let report = broken.integrity_check(&IntegrityInputs::default());
        assert!(report.violations.iter().any(|v| matches!(v, Violation::VersionGap { .. })));
    }

    #[test]
    fn integrity_flags_stale_chunk_reference() {
        let mut lake = DataLake::in_memory();
        put(&mut lake, "k", "one");
        put(&mut lake, "k", "two");
        let inputs = IntegrityInputs {
            chunks: vec![("k#v1#c0".into(), "k".into(), 1)],
            tickets: vec![],
        };
        let report = lake.integrity_check(&inputs);
        assert!(matches!(report.violations[0], Violation::DanglingChunk { .. }));
    }

    #[test]
    fn persistence_roundtrip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut lake = DataLake::open(dir.path()).unwrap();
            put(&mut lake, "a", "alpha");
            put(&mut lake, "a", "alpha 2");
            lake.delete("a").unwrap();
        }
        // simulate a crash mid-append
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(&[200, 0, 0, 0, b'{']).unwrap();
        drop(f);
        let lake = DataLake::open(dir.path()).unwrap();
        assert_eq!(lake.current_seq(), 3);
        assert_eq!(lake.history("a").len(), 3);
        assert!(lake.get("a", None, None).is_err());
        let sidecar: Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(SIDECAR_FILE)).unwrap()).unwrap();
        assert_eq!(sidecar["lake_seq"], 3);
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LOG_FILE), b"garbage header!!").unwrap();
        assert!(matches!(DataLake::open(dir.path()), Err(LakeError::Corrupt(_))));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Upsert(u8, u8),
        Delete(u8),
        Rollback(u8, u8),
        Archive(u8),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => (0u8..6, 0u8..20).prop_map(|(k, t)| Op::Upsert(k, t)),
            1 => (0u8..6).prop_map(Op::Delete),
            1 => (0u8..6, 1u8..5).prop_map(|(k, v)| Op::Rollback(k, v)),
            1 => (0u8..6).prop_map(Op::Archive),
        ]
    }

    fn run(lake: &mut DataLake, op: &Op) {
        let _ = match op {
            Op::Upsert(k, t) => lake
                .upsert(&doc(&format!("d{k}"), &format!("text {t}"), &[]), &accept(&format!("d{k}")))
                .map(|_| ()),
            Op::Delete(k) => lake.delete(&format!("d{k}")).map(|_| ()),
            Op::Rollback(k, v) => lake.rollback(&format!("d{k}"), u32::from(*v)).map(|_| ()),
            Op::Archive(k) => lake.archive(&format!("d{k}"), "test").map(|_| ()),
        };
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn snapshot_replay_equivalence(ops in proptest::collection::vec(arb_op(), 0..50), cut in 0usize..50) {
            let mut lake = DataLake::in_memory();
            let mut archived = 0;
            for op in &ops {
                run(&mut lake, op);
                let now = lake.archived_bytes();
                prop_assert!(now >= archived);
                archived = now;
            }
            let s = (cut as u64).min(lake.current_seq());
            let mut snap = lake.snapshot(s).unwrap();
            snap.apply(&lake.changes_since(s).unwrap(), &lake).unwrap();
            prop_assert_eq!(snap, lake.snapshot(lake.current_seq()).unwrap());
            prop_assert!(lake.integrity_check(&IntegrityInputs::default()).is_clean());
            let live = lake.live_versions();
            let mut keys: Vec<_> = live.iter().map(|v| v.doc_key.clone()).collect();
            keys.dedup();
            prop_assert_eq!(keys.len(), live.len());
        }
    }
}
