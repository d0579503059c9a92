//! Exact vector index and BM25 keyword index, published as immutable epochs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::chunking::{chunk_text, Chunk, ChunkPolicy};
use super::embedding::{centroid, cosine, Embedder, Embedding};
use crate::datalake::{acl_allows, ChangeSet, DataLake, DocumentVersion};
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("change feed starts at {got} but the index covers up to {expected}")]
    StaleFeed { expected: u64, got: u64 },
    #[error("query embedding from {got} but index uses {expected}")]
    EmbedderMismatch { expected: String, got: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEpoch {
    pub epoch: u64,
    pub lake_seq_covered: u64,
    pub chunk_count: usize,
    pub embedder_id: String,
    /// `1 − cos(centroid, previous centroid)`; absent for the first epoch or an empty corpus.
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedChunk {
    pub chunk: Chunk,
    /// `None` when the chunk has no embeddable tokens.
    pub embedding: Option<Embedding>,
    /// Lake sequence of the document version, used for recency tie-breaks.
    pub doc_lake_seq: u64,
    /// Boolean metadata flags set on the source document (e.g. `poisoned`).
    pub flags: BTreeSet<String>,
    pub term_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitSource {
    Vector,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// One immutable epoch of both indexes.
#[derive(Debug, Clone)]
pub struct IndexSnapshot {
    pub epoch: IndexEpoch,
    chunks: BTreeMap<String, Arc<IndexedChunk>>,
    by_doc: BTreeMap<String, (u32, Vec<String>)>,
    postings: HashMap<String, BTreeMap<String, u32>>,
    total_terms: usize,
    pub centroid: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PersistedIndex {
    epoch: IndexEpoch,
    chunks: Vec<IndexedChunk>,
    centroid_history: BTreeMap<u64, Vec<f64>>,
}

impl IndexSnapshot {
    pub fn empty(embedder_id: &str, dim: usize) -> Self {
        Self {
            epoch: IndexEpoch {
                epoch: 0,
                lake_seq_covered: 0,
                chunk_count: 0,
                embedder_id: embedder_id.to_string(),
                drift: None,
            },
            chunks: BTreeMap::new(),
            by_doc: BTreeMap::new(),
            postings: HashMap::new(),
            total_terms: 0,
            centroid: vec![0.0; dim],
        }
    }

    fn insert(&mut self, c: IndexedChunk) {
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in tokenize(&c.chunk.text) {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            self.postings.entry(t).or_default().insert(c.chunk.chunk_id.clone(), n);
        }
        self.total_terms += c.term_count;
        let entry = self
            .by_doc
            .entry(c.chunk.doc_key.clone())
            .or_insert_with(|| (c.chunk.version, Vec::new()));
        entry.0 = c.chunk.version;
        entry.1.push(c.chunk.chunk_id.clone());
        self.chunks.insert(c.chunk.chunk_id.clone(), Arc::new(c));
    }

    fn remove_doc(&mut self, doc_key: &str) -> usize {
        let Some((_, ids)) = self.by_doc.remove(doc_key) else {
            return 0;
        };
        for id in &ids {
            if let Some(c) = self.chunks.remove(id) {
                self.total_terms -= c.term_count;
                for t in tokenize(&c.chunk.text) {
                    if let Some(p) = self.postings.get_mut(&t) {
                        p.remove(id);
                        if p.is_empty() {
                            self.postings.remove(&t);
                        }
                    }
                }
            }
        }
        ids.len()
    }

    fn finish(&mut self, epoch: u64, lake_seq: u64, previous: Option<&[f64]>) {
        let dim = self.centroid.len();
        self.centroid = centroid(
            dim,
            self.chunks
                .values()
                .filter_map(|c| c.embedding.as_ref().map(|e| e.vector.as_slice())),
        );
        let drift = previous.and_then(|p| {
            let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
            (!zero(p) && !zero(&self.centroid)).then(|| 1.0 - cosine(p, &self.centroid))
        });
        self.epoch = IndexEpoch {
            epoch,
            lake_seq_covered: lake_seq,
            chunk_count: self.chunks.len(),
            embedder_id: self.epoch.embedder_id.clone(),
            drift,
        };
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&IndexedChunk> {
        self.chunks.get(chunk_id).map(|c| c.as_ref())
    }

    pub fn chunks(&self) -> impl Iterator<Item = &IndexedChunk> {
        self.chunks.values().map(|c| c.as_ref())
    }

    pub fn chunk_ids(&self) -> BTreeSet<String> {
        self.chunks.keys().cloned().collect()
    }

    /// `(chunk_id, doc_key, version)` for integrity checks.
    pub fn chunk_refs(&self) -> Vec<(String, String, u32)> {
        self.chunks
            .values()
            .map(|c| (c.chunk.chunk_id.clone(), c.chunk.doc_key.clone(), c.chunk.version))
            .collect()
    }

    pub fn doc_version(&self, doc_key: &str) -> Option<u32> {
        self.by_doc.get(doc_key).map(|(v, _)| *v)
    }

    /// Number of chunks containing `term` (already lowercased).
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, BTreeMap::len)
    }

    fn rank(&self, mut scored: Vec<(&IndexedChunk, f64)>, k: usize) -> Vec<Hit> {
        // scores equal to 12 decimals tie, so rounding noise never beats the tie-breaks
        scored.sort_by(|(a, sa), (b, sb)| {
            tie_key(*sb)
                .total_cmp(&tie_key(*sa))
                .then(b.doc_lake_seq.cmp(&a.doc_lake_seq))
                .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
        });
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (c, s))| Hit {
                chunk_id: c.chunk.chunk_id.clone(),
                score: s,
                rank: i + 1,
            })
            .collect()
    }

    /// Exact top-k by cosine over chunks visible to `role`.
    pub fn search_vector(&self, qv: &Embedding, k: usize, role: Option<&str>) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if qv.embedder_id != self.epoch.embedder_id {
            return Err(IndexError::EmbedderMismatch {
                expected: self.epoch.embedder_id.clone(),
                got: qv.embedder_id.clone(),
            });
        }
        let scored = self
            .chunks
            .values()
            .filter(|c| acl_allows(&c.chunk.acl, role))
            .filter_map(|c| c.embedding.as_ref().map(|e| (c.as_ref(), qv.cosine(e))))
            .collect();
        Ok(self.rank(scored, k))
    }

    pub fn bm25_idf(&self, df: usize) -> f64 {
        let n = self.chunks.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 top-k over chunks visible to `role`. Terms are tokenized and deduplicated.
    pub fn search_keyword(&self, terms: &[String], k: usize, role: Option<&str>) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let mut query: Vec<String> = terms.iter().flat_map(|t| tokenize(t)).collect();
        query.sort();
        query.dedup();
        if self.chunks.is_empty() {
            return Ok(Vec::new());
        }
        let avgdl = self.total_terms as f64 / self.chunks.len() as f64;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for term in &query {
            let Some(post) = self.postings.get(term) else {
                continue;
            };
            let idf = self.bm25_idf(post.len());
            for (id, &tf) in post {
                let c = &self.chunks[id];
                let tf = f64::from(tf);
                let dl = c.term_count as f64;
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl.max(f64::MIN_POSITIVE));
                *scores.entry(id.as_str()).or_default() += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }
        let scored = scores
            .into_iter()
            .map(|(id, s)| (self.chunks[id].as_ref(), s))
            .filter(|(c, _)| acl_allows(&c.chunk.acl, role))
            .collect();
        Ok(self.rank(scored, k))
    }
}

fn tie_key(score: f64) -> f64 {
    (score * 1e12).round()
}

fn index_version(
    v: &DocumentVersion,
    policy: &ChunkPolicy,
    embedder: &dyn Embedder,
) -> Vec<IndexedChunk> {
    if v.text.trim().is_empty() {
        return Vec::new();
    }
    let flags: BTreeSet<String> = v
        .metadata
        .extra
        .iter()
        .filter(|(_, val)| matches!(val, serde_json::Value::Bool(true)))
        .map(|(k, _)| k.clone())
        .collect();
    chunk_text(&v.doc_key, v.version, &v.text, &v.acl, policy)
        .into_iter()
        .map(|chunk| IndexedChunk {
            embedding: embedder.embed(&chunk.text).ok(),
            term_count: tokenize(&chunk.text).len(),
            doc_lake_seq: v.lake_seq,
            flags: flags.clone(),
            chunk,
        })
        .collect()
}

/// Full derivation of an index snapshot from the lake's live set at `seq`.
pub fn build_snapshot(
    lake: &DataLake,
    seq: u64,
    policy: &ChunkPolicy,
    embedder: &dyn Embedder,
    epoch: u64,
    previous_centroid: Option<&[f64]>,
) -> IndexSnapshot {
    let mut snap = IndexSnapshot::empty(embedder.id(), embedder.dim());
    if let Ok(s) = lake.snapshot(seq.min(lake.current_seq())) {
        for v in s.live.values() {
            for c in index_version(v, policy, embedder) {
                snap.insert(c);
            }
        }
    }
    snap.finish(epoch, seq, previous_centroid);
    snap
}

/// The retrieval index: readers pin the current epoch; one writer at a time
/// builds the next epoch and swaps it in.
pub struct RetrievalIndex {
    current: RwLock<Arc<IndexSnapshot>>,
    centroids: Mutex<BTreeMap<u64, Vec<f64>>>,
    writer: Mutex<()>,
    embedder: Arc<dyn Embedder>,
    policy: ChunkPolicy,
}

impl std::fmt::Debug for RetrievalIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalIndex")
            .field("epoch", &self.current.read().epoch)
            .field("policy", &self.policy)
            .finish()
    }
}

impl RetrievalIndex {
    pub fn new(embedder: Arc<dyn Embedder>, policy: ChunkPolicy) -> Self {
        let empty = IndexSnapshot::empty(embedder.id(), embedder.dim());
        let mut centroids = BTreeMap::new();
        centroids.insert(0, empty.centroid.clone());
        Self {
            current: RwLock::new(Arc::new(empty)),
            centroids: Mutex::new(centroids),
            writer: Mutex::new(()),
            embedder,
            policy,
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn policy(&self) -> &ChunkPolicy {
        &self.policy
    }

    /// Pin the current epoch.
    pub fn snapshot(&self) -> Arc<IndexSnapshot> {
        self.current.read().clone()
    }

    pub fn epoch(&self) -> IndexEpoch {
        self.current.read().epoch.clone()
    }

    pub fn centroid_at(&self, epoch: u64) -> Option<Vec<f64>> {
        self.centroids.lock().get(&epoch).cloned()
    }

    fn publish(&self, snap: IndexSnapshot) -> IndexEpoch {
        let e = snap.epoch.clone();
        self.centroids.lock().insert(e.epoch, snap.centroid.clone());
        *self.current.write() = Arc::new(snap);
        e
    }

    /// Apply a change feed incrementally, re-chunking only the touched documents.
    pub fn apply(&self, cs: &ChangeSet, lake: &DataLake) -> Result<IndexEpoch, IndexError> {
        let _w = self.writer.lock();
        let cur = self.snapshot();
        if cs.from_seq != cur.epoch.lake_seq_covered {
            return Err(IndexError::StaleFeed {
                expected: cur.epoch.lake_seq_covered,
                got: cs.from_seq,
            });
        }
        let mut next = (*cur).clone();
        let touched: BTreeSet<&str> = cs.entries.iter().map(|e| e.doc_key.as_str()).collect();
        for key in touched {
            let target = lake.live_at(key, cs.to_seq);
            if target.is_some() && target == next.doc_version(key) {
                continue;
            }
            next.remove_doc(key);
            if let Some(v) = target.and_then(|v| lake.version(key, v)) {
                for c in index_version(&v, &self.policy, self.embedder.as_ref()) {
                    next.insert(c);
                }
            }
        }
        next.finish(cur.epoch.epoch + 1, cs.to_seq, Some(&cur.centroid));
        Ok(self.publish(next))
    }

    /// Catch up with the lake: fetch the change feed since the covered sequence and apply it.
    pub fn sync(&self, lake: &DataLake) -> Result<IndexEpoch, IndexError> {
        let from = self.epoch().lake_seq_covered;
        let cs = lake
            .changes_since(from)
            .map_err(|e| IndexError::Persist(e.to_string()))?;
        self.apply(&cs, lake)
    }

    pub fn rebuild(&self, lake: &DataLake) -> IndexEpoch {
        let _w = self.writer.lock();
        let cur = self.snapshot();
        let snap = build_snapshot(
            lake,
            lake.current_seq(),
            &self.policy,
            self.embedder.as_ref(),
            cur.epoch.epoch + 1,
            Some(&cur.centroid),
        );
        self.publish(snap)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let snap = self.snapshot();
        let persisted = PersistedIndex {
            epoch: snap.epoch.clone(),
            chunks: snap.chunks().cloned().collect(),
            centroid_history: self.centroids.lock().clone(),
        };
        let body = serde_json::to_vec(&persisted).map_err(|e| IndexError::Persist(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body).map_err(|e| IndexError::Persist(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| IndexError::Persist(e.to_string()))
    }

    /// Load a saved index. Falls back to an empty index when the file is
    /// absent or was built by another embedder.
    pub fn load(path: &Path, embedder: Arc<dyn Embedder>, policy: ChunkPolicy) -> Result<Self, IndexError> {
        let idx = Self::new(embedder, policy);
        if !path.exists() {
            return Ok(idx);
        }
        let body = std::fs::read(path).map_err(|e| IndexError::Persist(e.to_string()))?;
        let p: PersistedIndex = serde_json::from_slice(&body).map_err(|e| IndexError::Persist(e.to_string()))?;
        if p.epoch.embedder_id != idx.embedder.id() {
            return Ok(idx);
        }
        let mut snap = IndexSnapshot::empty(idx.embedder.id(), idx.embedder.dim());
        for c in p.chunks {
            snap.insert(c);
        }
        snap.centroid = p
            .centroid_history
            .get(&p.epoch.epoch)
            .cloned()
            .unwrap_or_else(|| vec![0.0; idx.embedder.dim()]);
        snap.epoch = p.epoch;
        *idx.centroids.lock() = p.centroid_history;
        *idx.current.write() = Arc::new(snap);
        Ok(idx)
    }
}
