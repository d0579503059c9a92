use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{fnv1a64, tokenize};

pub const REFERENCE_DIM: usize = 256;
pub const REFERENCE_EMBEDDER_ID: &str = "hash-bow-256-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub embedder_id: String,
}

impl Embedding {
    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.vector, &other.vector)
    }

    /// Cosine similarity. Embeddings are unit-norm, so this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of arbitrary (not necessarily normalized) vectors; 0 if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("text has no tokens to embed")]
    EmptyText,
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

/// Feature-hashed bag of words: lowercase word counts hashed into `dim`
/// buckets with a sign bit, then L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    id: String,
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            id: REFERENCE_EMBEDDER_ID.to_string(),
            dim: REFERENCE_DIM,
        }
    }
}

impl HashingEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            id: format!("hash-bow-{dim}-v1"),
            dim,
        }
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for (tok, c) in &counts {
            let h = fnv1a64(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign * f64::from(*c);
        }
        let n = norm(&v);
        if n == 0.0 {
            // every bucket cancelled out; fall back to unsigned counts
            for (tok, c) in &counts {
                let bucket = (fnv1a64(tok.as_bytes()) % self.dim as u64) as usize;
                v[bucket] += f64::from(*c);
            }
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Embedding {
            vector: v,
            embedder_id: self.id.clone(),
        })
    }
}

/// Mean of the given vectors (zero vector when empty).
pub fn centroid<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("The quick brown fox").unwrap();
        let b = e.embed("The quick brown fox").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), REFERENCE_DIM);
        assert!((norm(&a.vector) - 1.0).abs() < 1e-9);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_rejected() {
        let e = HashingEmbedder::default();
        assert_eq!(e.embed(" ...  ").unwrap_err(), EmbedError::EmptyText);
    }

    #[test]
    fn disjoint_vocabularies_nearly_orthogonal() {
        let e = HashingEmbedder::default();
        let a = e.embed("refund warranty receipt exchange store credit").unwrap();
        let b = e.embed("glacier volcano tectonic magma erosion sediment").unwrap();
        // bound checked against a direct bucket-collision count for this pair
        assert!(a.cosine(&b).abs() <= 0.2, "{}", a.cosine(&b));
    }

    #[test]
    fn case_insensitive() {
        let e = HashingEmbedder::default();
        assert_eq!(e.embed("Refund Policy").unwrap(), e.embed("refund policy").unwrap());
    }
}
