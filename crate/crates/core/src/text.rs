//! Tokenization, hashing and sentence utilities shared by every stage.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; spreads FNV output so that low bits are usable for bucketing.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Well-mixed stable 64-bit hash of a string.
pub fn hash64(s: &str) -> u64 {
    mix64(fnv1a64(s.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could",
    "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further",
    "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my", "no", "nor",
    "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "out", "over",
    "own", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Tokens with stopwords removed.
pub fn content_terms(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Lowercase and collapse all whitespace runs to a single space.
pub fn normalize_for_hash(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Digest pair over normalized content: a 64-bit fast hash plus the full SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentHash {
    pub short: u64,
    pub full: String,
}

impl ContentHash {
    pub fn of(text: &str) -> Self {
        let norm = normalize_for_hash(text);
        Self {
            short: fnv1a64(norm.as_bytes()),
            full: sha256_hex(norm.as_bytes()),
        }
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}:{}", self.short, &self.full[..16.min(self.full.len())])
    }
}

/// A whitespace-delimited token with the byte range of the segment it owns.
///
/// Segments tile the source text: the first segment also owns any leading
/// whitespace and each segment owns the whitespace that follows its word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub word_end: usize,
}

pub fn segments(text: &str) -> Vec<Segment> {
    let mut words: Vec<(usize, usize)> = Vec::new();
    let mut cur: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = cur.take() {
                words.push((s, i));
            }
        } else if cur.is_none() {
            cur = Some(i);
        }
    }
    if let Some(s) = cur {
        words.push((s, text.len()));
    }
    let n = words.len();
    words
        .iter()
        .enumerate()
        .map(|(i, &(ws, we))| Segment {
            start: if i == 0 { 0 } else { ws },
            end: if i + 1 < n { words[i + 1].0 } else { text.len() },
            word_end: we,
        })
        .collect()
}

/// Count of whitespace-delimited tokens; the unit for chunk sizes and prompt budgets.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn is_sentence_final(word: &str) -> bool {
    let trimmed = word.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
    trimmed.ends_with(['.', '!', '?'])
}

/// Sentence boundaries as half-open ranges of segment indices.
pub fn sentence_ranges(text: &str, segs: &[Segment]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, seg) in segs.iter().enumerate() {
        let word = &text[seg.start..seg.word_end];
        let ends_para = text[seg.word_end..seg.end].contains("\n\n");
        if is_sentence_final(word) || ends_para {
            out.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < segs.len() {
        out.push((start, segs.len()));
    }
    out
}

/// Split text into trimmed sentences.
pub fn split_sentences(text: &str) -> Vec<String> {
    let segs = segments(text);
    sentence_ranges(text, &segs)
        .into_iter()
        .map(|(a, b)| text[segs[a].start..segs[b - 1].end].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
