//! Text embeddings and the binary vector store.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;
use thiserror::Error;

use crate::llm::Limiter;
use crate::profiles::Subject;

pub const EMBED_DIM: usize = 384;
pub const STORE_MAGIC: &[u8; 4] = b"EMBS";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no embeddable tokens")]
    ZeroVector,
    #[error("embedding has {got} dimensions, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedder unavailable after {attempts} attempts: {reason}")]
    EmbedderUnavailable { attempts: u32, reason: String },
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("no vector for {0}")]
    MissingVector(Subject),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A unit-length 384-d vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `values`.
    pub fn from_raw(values: &[f64]) -> Result<Self, EmbedError> {
        if values.len() != EMBED_DIM {
            return Err(EmbedError::DimMismatch { got: values.len(), expected: EMBED_DIM });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    /// Wraps stored values without renormalizing.
    fn from_stored(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        dot / (self.norm() * other.norm())
    }

    fn renormalized(&self) -> Result<Self, EmbedError> {
        Self::from_raw(&self.0.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

pub fn embed_text(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    embedder.embed(text)
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Hashed bag of words: each token lands in one of 384 buckets with a hashed sign.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub seed: u64,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn hash(&self, key: u64, token: &str) -> u64 {
        let mut h = SipHasher13::new_with_keys(self.seed, key);
        h.write(token.as_bytes());
        h.finish()
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        mock_embed(text, self)
    }
}

pub fn mock_embed(text: &str, embedder: &MockEmbedder) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut acc = vec![0.0f64; EMBED_DIM];
    for token in tokenize(text) {
        let bucket = (embedder.hash(1, &token) % EMBED_DIM as u64) as usize;
        let sign = if embedder.hash(2, &token) >> 63 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
    if acc.iter().all(|&x| x == 0.0) {
        // Colliding tokens cancelled out (or there were none): one bucket for the whole text.
        acc[(embedder.hash(3, text.trim()) % EMBED_DIM as u64) as usize] = 1.0;
    }
    EmbeddingVector::from_raw(&acc)
}

/// OpenAI-style embedding endpoint: `{model, input}` in, vector at `response_pointer` out.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    config: RemoteEmbedderConfig,
    limiter: Arc<Limiter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub parallelism: usize,
    pub response_pointer: String,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model_name: "all-MiniLM-L6-v2".into(),
            api_key_env: "EMBED_API_KEY".into(),
            max_retries: 3,
            backoff_ms: 500,
            parallelism: 4,
            response_pointer: "/data/0/embedding".into(),
        }
    }
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::EmbedderUnavailable { attempts: 0, reason: e.to_string() })?;
        let limiter = Arc::new(Limiter::new(config.parallelism));
        Ok(Self { client, config, limiter })
    }

    fn attempt(&self, text: &str) -> Result<Vec<f64>, (bool, String)> {
        let _slot = self.limiter.acquire();
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .json(&serde_json::json!({ "model": self.config.model_name, "input": text }));
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|_| (true, "transport failure".to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((retry, format!("status {}", status.as_u16())));
        }
        let body: serde_json::Value = resp.json().map_err(|_| (true, "response is not JSON".to_string()))?;
        body.pointer(&self.config.response_pointer)
            .and_then(|v| v.as_array())
            .map(|arr| arr.iter().filter_map(serde_json::Value::as_f64).collect())
            .ok_or((true, format!("no vector at {}", self.config.response_pointer)))
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let attempts = self.config.max_retries + 1;
        let mut reason = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(16)));
            }
            match self.attempt(text) {
                Ok(values) => return EmbeddingVector::from_raw(&values),
                Err((true, r)) => reason = r,
                Err((false, r)) => return Err(EmbedError::EmbedderUnavailable { attempts: attempt + 1, reason: r }),
            }
        }
        Err(EmbedError::EmbedderUnavailable { attempts, reason })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Mock,
    File,
}

/// Vectors for users and items. Provenance is not persisted; loaded stores report `File`.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub user_vectors: BTreeMap<u32, EmbeddingVector>,
    pub item_vectors: BTreeMap<u32, EmbeddingVector>,
    pub provenance: Provenance,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.user_vectors == other.user_vectors && self.item_vectors == other.item_vectors
    }
}

impl EmbeddingStore {
    pub fn new(provenance: Provenance) -> Self {
        Self { dim: EMBED_DIM, user_vectors: BTreeMap::new(), item_vectors: BTreeMap::new(), provenance }
    }

    pub fn insert(&mut self, subject: Subject, v: EmbeddingVector) {
        match subject {
            Subject::User(id) => self.user_vectors.insert(id, v),
            Subject::Item(id) => self.item_vectors.insert(id, v),
        };
    }

    pub fn get(&self, subject: Subject) -> Option<&EmbeddingVector> {
        match subject {
            Subject::User(id) => self.user_vectors.get(&id),
            Subject::Item(id) => self.item_vectors.get(&id),
        }
    }

    pub fn len(&self) -> usize {
        self.user_vectors.len() + self.item_vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with every vector L2-normalized again.
    pub fn renormalized(&self) -> Result<Self, EmbedError> {
        let renorm = |m: &BTreeMap<u32, EmbeddingVector>| -> Result<BTreeMap<u32, EmbeddingVector>, EmbedError> {
            m.iter().map(|(k, v)| Ok((*k, v.renormalized()?))).collect()
        };
        Ok(Self {
            dim: self.dim,
            user_vectors: renorm(&self.user_vectors)?,
            item_vectors: renorm(&self.item_vectors)?,
            provenance: self.provenance,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.len() * (9 + 4 * self.dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (kind, map) in [(0u8, &self.user_vectors), (1u8, &self.item_vectors)] {
            for (id, v) in map {
                out.push(kind);
                out.extend_from_slice(&u64::from(*id).to_le_bytes());
                for x in v.values() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut r = bytes;
        let corrupt = |m: &str| EmbedError::CorruptStore(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != STORE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b2).map_err(|_| corrupt("truncated header"))?;
        let version = u16::from_le_bytes(b2);
        if version != STORE_VERSION {
            return Err(EmbedError::CorruptStore(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4).map_err(|_| corrupt("truncated header"))?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim != EMBED_DIM {
            return Err(EmbedError::CorruptStore(format!("header dim {dim}, expected {EMBED_DIM}")));
        }
        r.read_exact(&mut b4).map_err(|_| corrupt("truncated header"))?;
        let count = u32::from_le_bytes(b4) as usize;
        if r.len() != count * (9 + 4 * dim) {
            return Err(corrupt("record section length does not match count"));
        }
        let mut store = Self::new(Provenance::File);
        for _ in 0..count {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            r.read_exact(&mut b8)?;
            let id = u32::try_from(u64::from_le_bytes(b8)).map_err(|_| corrupt("id exceeds u32"))?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4)?;
                let v = f32::from_le_bytes(b4);
                if !v.is_finite() {
                    return Err(corrupt("non-finite value"));
                }
                values.push(v);
            }
            let subject = match kind[0] {
                0 => Subject::User(id),
                1 => Subject::Item(id),
                k => return Err(EmbedError::CorruptStore(format!("unknown record kind {k}"))),
            };
            store.insert(subject, EmbeddingVector::from_stored(values));
        }
        Ok(store)
    }
}

pub fn store_save(store: &EmbeddingStore, path: &Path) -> Result<(), EmbedError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&store.to_bytes())?;
    Ok(())
}

pub fn store_load(path: &Path) -> Result<EmbeddingStore, EmbedError> {
    EmbeddingStore::from_bytes(&fs::read(path)?)
}

/// Embeds `(subject, text)` pairs on up to `workers` threads.
pub fn embed_subjects(
    texts: &[(Subject, String)],
    embedder: &dyn Embedder,
    provenance: Provenance,
    workers: usize,
) -> Result<EmbeddingStore, EmbedError> {
    let vectors = crate::util::par_map(texts, workers, |(_, text)| embed_text(text, embedder));
    let mut store = EmbeddingStore::new(provenance);
    for ((subject, _), v) in texts.iter().zip(vectors) {
        store.insert(*subject, v?);
    }
    Ok(store)
}
