//! Instruction embeddings and top-k demonstration retrieval.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::types::{DemoBuffer, Demonstration, Instruction};

pub const DEFAULT_DIMS: usize = 256;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
}

/// A dense vector; unit-norm unless built from an empty token list.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Scaled to unit length; the zero vector is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
        self
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| x * c).collect())
    }
}

/// `dot(u, v) / (|u| |v|)`, or 0 when either vector is zero.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, RetrievalError> {
    if u.dims() != v.dims() {
        return Err(RetrievalError::DimensionMismatch(u.dims(), v.dims()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dims(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError>;
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-words embedding: each token hashes to a signed basis direction,
/// the directions are mean-pooled and the result L2-normalized. Word order
/// does not matter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dims: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dims: DEFAULT_DIMS }
    }
}

impl HashEmbedder {
    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; self.dims];
        let tokens = tokenize(text);
        if tokens.is_empty() || self.dims == 0 {
            return Embedding(v);
        }
        for t in &tokens {
            let h = fnv1a64(t.as_bytes());
            let i = (h % self.dims as u64) as usize;
            v[i] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let n = tokens.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        Embedding(v).normalized()
    }
}

impl Embedder for HashEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        Ok(self.embed_text(text))
    }
}

/// Remote embedder: `POST {"text": ...}` returning `{"vector": [...]}`.
pub struct HttpEmbedder {
    url: String,
    dims: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dims: usize, timeout: Duration) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            dims,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        let resp = self
            .client
            .post(&self.url)
            .json(&json!({ "text": text }))
            .send()
            .map_err(|e| RetrievalError::BackendUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrievalError::BackendUnavailable(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp
            .json()
            .map_err(|e| RetrievalError::MalformedResponse(e.to_string()))?;
        let values: Vec<f64> = body
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| RetrievalError::MalformedResponse("missing \"vector\" array".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| RetrievalError::MalformedResponse("non-numeric entry".into()))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != self.dims {
            return Err(RetrievalError::DimensionMismatch(values.len(), self.dims));
        }
        Ok(Embedding(values).normalized())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    score: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Greater means better: higher score, then earlier index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the `k` best scores, best first; ties go to the lower index.
/// Runs in O(n log k) with a bounded min-heap.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        let item = Ranked { score, index };
        if heap.len() < k {
            heap.push(Reverse(item));
        } else if heap.peek().is_some_and(|Reverse(worst)| item > *worst) {
            heap.pop();
            heap.push(Reverse(item));
        }
    }
    let mut best: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
    best.sort_by(|a, b| b.cmp(a));
    best.into_iter().map(|r| r.index).collect()
}

/// Precomputed instruction embeddings for one buffer.
#[derive(Debug, Clone)]
pub struct RetrievalIndex<'b> {
    demos: &'b [Demonstration],
    embeddings: Vec<Embedding>,
}

impl<'b> RetrievalIndex<'b> {
    pub fn build(buffer: &'b DemoBuffer, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let embeddings = buffer
            .demos()
            .iter()
            .map(|d| embedder.embed(d.instruction.as_str()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            demos: buffer.demos(),
            embeddings,
        })
    }

    pub fn scores(&self, query: &Embedding) -> Result<Vec<f64>, RetrievalError> {
        self.embeddings.iter().map(|e| cosine(query, e)).collect()
    }

    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<&'b Demonstration>, RetrievalError> {
        let scores = self.scores(query)?;
        Ok(top_k_indices(&scores, k).into_iter().map(|i| &self.demos[i]).collect())
    }
}

/// The `min(k, |buffer|)` demos whose instructions are most similar to
/// `query`, by non-increasing cosine; ties keep buffer order.
pub fn retrieve_top_k<'b>(
    buffer: &'b DemoBuffer,
    query: &Instruction,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<&'b Demonstration>, RetrievalError> {
    let index = RetrievalIndex::build(buffer, embedder)?;
    index.top_k(&embedder.embed(query.as_str())?, k)
}
