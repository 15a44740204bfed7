//! Base embeddings, the learnable projection head, and every similarity computation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::http::{post_with_retry, HttpTransport, RequestError, RetryPolicy};
use crate::util::{fnv1a_seeded, sha256_hex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("embedding endpoint failed: {0}")]
    Endpoint(#[from] RequestError),
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
}

/// A dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| x * alpha).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, higher = more similar.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok(dot(a.values(), b.values()) / (na * nb))
}

/// The trainable d×d linear map applied on top of frozen base embeddings.
///
/// Weights are stored row-major. A fresh head is the identity, so an untrained
/// head reproduces the base retriever exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    dim: usize,
    weights: Vec<f64>,
    pub base_model_id: String,
    pub version: u32,
}

impl ProjectionHead {
    pub fn identity(dim: usize, base_model_id: impl Into<String>) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weights,
            base_model_id: base_model_id.into(),
            version: 0,
        }
    }

    pub fn from_weights(
        dim: usize,
        weights: Vec<f64>,
        base_model_id: impl Into<String>,
        version: u32,
    ) -> Result<Self, EmbedError> {
        if weights.len() != dim * dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim * dim,
                got: weights.len(),
            });
        }
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            dim,
            weights,
            base_model_id: base_model_id.into(),
            version,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        *self == Self {
            base_model_id: self.base_model_id.clone(),
            version: self.version,
            ..Self::identity(self.dim, "")
        }
    }

    /// W·v
    pub fn project(&self, v: &EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
        if v.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let out = self
            .weights
            .chunks_exact(self.dim)
            .map(|row| dot(row, v.values()))
            .collect();
        EmbeddingVector::new(out)
    }
}

pub fn project(head: &ProjectionHead, v: &EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
    head.project(v)
}

/// cos(W·u, W·v): the similarity the contrastive loss and HER-based retrieval use.
pub fn her_similarity(
    head: &ProjectionHead,
    u: &EmbeddingVector,
    v: &EmbeddingVector,
) -> Result<f64, EmbedError> {
    similarity(&head.project(u)?, &head.project(v)?)
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Deterministic feature-hashing embedder for tests and offline runs.
///
/// Features are word unigrams plus boundary-padded character trigrams of the
/// normalized text, each hashed with a seeded FNV-1a into a signed bucket.
/// Strings with similar surface forms share many trigrams and so land close
/// together in cosine space.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    model_id: String,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "mock embedder dimension must be positive");
        Self {
            dim,
            seed,
            model_id: format!("mock-ngram-d{dim}-s{seed}"),
        }
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        mock_embed(text, self.dim, self.seed)
    }
}

fn normalize_for_hashing(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn add_feature(values: &mut [f64], seed: u64, feature: &[u8], weight: f64) {
    let h = fnv1a_seeded(seed, feature);
    let idx = (h % values.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    values[idx] += sign * weight;
}

pub fn mock_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    let mut values = vec![0.0; dim];
    for word in normalize_for_hashing(text) {
        add_feature(&mut values, seed, format!("w:{word}").as_bytes(), 1.0);
        let padded: Vec<char> = format!(" {word} ").chars().collect();
        for gram in padded.windows(3) {
            let g: String = gram.iter().collect();
            add_feature(&mut values, seed, format!("c:{g}").as_bytes(), 0.5);
        }
    }
    if values.iter().all(|x| *x == 0.0) {
        // no alphanumeric content, or every feature cancelled out
        let h = fnv1a_seeded(seed, text.as_bytes());
        values[(h % dim as u64) as usize] = 1.0;
    }
    EmbeddingVector(values)
}

impl EmbeddingProvider for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Client for `POST {model, input: [..]} -> {data: [{embedding: [..]}]}` endpoints.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model_id: String,
    pub dim: usize,
    pub token: Option<String>,
    pub policy: RetryPolicy,
    transport: Arc<dyn HttpTransport>,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
        dim: usize,
        token: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dim,
            token,
            policy: RetryPolicy::default(),
            transport,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "model": self.model_id, "input": texts });
        let reply = post_with_retry(
            self.transport.as_ref(),
            &self.endpoint,
            self.token.as_deref(),
            &body,
            &self.policy,
        )?;
        let parsed: EmbeddingResponse = serde_json::from_str(&reply.reply.body)
            .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dim,
                        got: d.embedding.len(),
                    });
                }
                EmbeddingVector::new(d.embedding)
            })
            .collect()
    }
}

/// Content hash used as the cache key for a piece of text.
pub fn text_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

/// Caching front end over an [`EmbeddingProvider`].
///
/// Cache keys are text content hashes; the cache is scoped to the provider's
/// model id. Misses are sent to the provider in batches, at most
/// `concurrency` batches in flight.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<String, EmbeddingVector>>,
    provider_texts: AtomicUsize,
    pub batch_size: usize,
    pub concurrency: usize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: RwLock::new(HashMap::new()),
            provider_texts: AtomicUsize::new(0),
            batch_size: 64,
            concurrency: 4,
        }
    }

    pub fn with_limits(mut self, batch_size: usize, concurrency: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.concurrency = concurrency.max(1);
        self
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    /// Number of texts that were actually sent to the provider.
    pub fn new_embeddings(&self) -> usize {
        self.provider_texts.load(Ordering::SeqCst)
    }

    /// Seeds the cache with a previously persisted vector.
    pub fn preload(&self, content_hash: String, vector: EmbeddingVector) {
        self.cache.write().unwrap().insert(content_hash, vector);
    }

    pub fn cached(&self, text: &str) -> Option<EmbeddingVector> {
        self.cache.read().unwrap().get(&text_hash(text)).cloned()
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_all(&[text])?;
        Ok(out.pop().expect("one vector per input"))
    }

    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let hashes: Vec<String> = texts.iter().map(|t| text_hash(t)).collect();
        let mut misses: Vec<String> = Vec::new();
        {
            let cache = self.cache.read().unwrap();
            let mut seen = std::collections::HashSet::new();
            for (text, h) in texts.iter().zip(&hashes) {
                if !cache.contains_key(h) && seen.insert(h.clone()) {
                    misses.push(text.to_string());
                }
            }
        }
        if !misses.is_empty() {
            let batches: Vec<&[String]> = misses.chunks(self.batch_size).collect();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.concurrency)
                .build()
                .expect("thread pool");
            let results: Vec<Result<Vec<EmbeddingVector>, EmbedError>> = pool.install(|| {
                batches
                    .par_iter()
                    .map(|b| self.provider.embed_batch(b))
                    .collect()
            });
            let dim = self.dim();
            let mut cache = self.cache.write().unwrap();
            for (batch, result) in batches.iter().zip(results) {
                let vectors = result?;
                self.provider_texts.fetch_add(batch.len(), Ordering::SeqCst);
                for (text, v) in batch.iter().zip(vectors) {
                    if v.dim() != dim {
                        return Err(EmbedError::DimensionMismatch {
                            expected: dim,
                            got: v.dim(),
                        });
                    }
                    cache.insert(text_hash(text), v);
                }
            }
        }
        let cache = self.cache.read().unwrap();
        Ok(hashes.iter().map(|h| cache[h].clone()).collect())
    }
}
