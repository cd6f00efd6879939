//! Embedding providers.
//!
//! Every provider returns unit-norm, finite vectors of a fixed dimension and is
//! deterministic per `provider_id`. Two providers ship here:
//!
//! - [`HashingEmbedder`]: signed feature hashing of lowercase alphanumeric tokens
//!   into 256 buckets. Network-free, used by tests and the synthetic fixture.
//! - [`HttpEmbedder`]: `POST {"model", "inputs"} -> {"embeddings"}` against any
//!   embedding server.
//!
//! [`CachedEmbedder`] wraps either with a persistent key→vector store.
//!
//! # Cache file format
//!
//! One JSON object per line: `{"key": "<provider_id>:<sha256(text) hex>", "values": [f64, ...]}`.
//! Values are the normalized vectors as returned to callers; floats are written in
//! shortest round-trip form so reloaded vectors are bitwise identical. Lines are only
//! ever appended; a malformed line (for example a torn final write) is ignored on load.
//! Deleting the file only costs recomputation.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::remote::{self, RemoteError, RetryPolicy};
use crate::util;

pub const HASHING_DIMENSION: usize = 256;

pub const EMBED_ENDPOINT_ENV: &str = "TOOLQUERY_EMBED_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl Embedding {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Cosine similarity; equal to the dot product for unit vectors.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("text at index {index} is empty")]
    EmptyText { index: usize },
    #[error("text at index {index} has a zero feature vector")]
    ZeroVector { index: usize },
    #[error("non-finite embedding value for text at index {index}")]
    NonFinite { index: usize },
    #[error("embedding at index {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding cache io error on {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Embeds `texts` in order. Element `i` equals `embed_text(texts[i])`.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

pub(crate) fn check_texts(texts: &[&str]) -> Result<(), EmbedError> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(index) => Err(EmbedError::EmptyText { index }),
        None => Ok(()),
    }
}

/// L2-normalizes `values` in place, rejecting non-finite and all-zero vectors.
pub(crate) fn normalize(values: &mut [f64], index: usize) -> Result<(), EmbedError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite { index });
    }
    let norm = dot(values, values).sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector { index });
    }
    for v in values.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Signed feature-hashing bag-of-words embedder.
///
/// Each token maps to one `(bucket, sign)` feature via 64-bit FNV-1a; the text vector
/// is the signed token-count histogram, L2-normalized. Texts whose tokens occupy
/// disjoint buckets have cosine exactly 0.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    provider_id: String,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(HASHING_DIMENSION)
    }
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            provider_id: format!("hashing-{dimension}"),
        }
    }

    /// Bucket and sign of a (lowercased) token.
    pub fn feature(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    fn raw(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for tok in tokenize(text) {
            let (b, s) = self.feature(&tok);
            v[b] += s;
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        check_texts(texts)?;
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut values = self.raw(t);
                normalize(&mut values, i)?;
                Ok(Embedding {
                    values,
                    provider_id: self.provider_id.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_batch() -> usize {
    64
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    inputs: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for a remote embedding service.
#[derive(Debug)]
pub struct HttpEmbedder {
    cfg: HttpEmbedderConfig,
    provider_id: String,
    calls: AtomicUsize,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpEmbedderConfig) -> Self {
        let provider_id = format!("remote:{}:{}", cfg.model, cfg.dimension);
        Self {
            cfg,
            provider_id,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of HTTP requests issued (retries included).
    pub fn remote_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn embed_chunk(&self, texts: &[&str], offset: usize) -> Result<Vec<Embedding>, EmbedError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let value = remote::post_json(
            &self.cfg.retry,
            &self.cfg.endpoint,
            &EmbedRequest {
                model: &self.cfg.model,
                inputs: texts,
            },
        )
        .map_err(|e| match e {
            RemoteError::Unavailable { .. } => EmbedError::ProviderUnavailable(e.to_string()),
            other => EmbedError::ProviderUnavailable(other.to_string()),
        })?;
        let resp: EmbedResponse = serde_json::from_value(value)
            .map_err(|e| EmbedError::ProviderUnavailable(format!("malformed response: {e}")))?;
        if resp.embeddings.len() != texts.len() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .enumerate()
            .map(|(i, mut values)| {
                let index = offset + i;
                if values.len() != self.cfg.dimension {
                    return Err(EmbedError::DimensionMismatch {
                        index,
                        expected: self.cfg.dimension,
                        got: values.len(),
                    });
                }
                normalize(&mut values, index)?;
                Ok(Embedding {
                    values,
                    provider_id: self.provider_id.clone(),
                })
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        check_texts(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for (c, chunk) in texts.chunks(self.cfg.batch_size.max(1)).enumerate() {
            out.extend(self.embed_chunk(chunk, c * self.cfg.batch_size.max(1))?);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    values: Vec<f64>,
}

/// Wraps a provider with a persistent cache keyed by `(provider_id, sha256(text))`.
///
/// Readers share an `RwLock`; appends to the cache file are serialized.
pub struct CachedEmbedder<P> {
    inner: P,
    path: Option<PathBuf>,
    map: RwLock<HashMap<String, Vec<f64>>>,
    writer: Mutex<Option<File>>,
    inner_calls: AtomicUsize,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    /// In-memory cache only.
    pub fn in_memory(inner: P) -> Self {
        Self {
            inner,
            path: None,
            map: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            inner_calls: AtomicUsize::new(0),
        }
    }

    /// Cache backed by `path`; existing entries are loaded.
    pub fn open(inner: P, path: &Path) -> Result<Self, EmbedError> {
        let cache_err = |source| EmbedError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(cache_err)?);
            for line in reader.lines() {
                let line = line.map_err(cache_err)?;
                if let Ok(rec) = serde_json::from_str::<CacheLine>(&line) {
                    map.insert(rec.key, rec.values);
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(cache_err)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(cache_err)?;
        // Terminate a torn final line so the next append starts on a fresh line.
        let len = file.metadata().map_err(cache_err)?.len();
        if len > 0 {
            let bytes = std::fs::read(path).map_err(cache_err)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n").map_err(cache_err)?;
            }
        }
        Ok(Self {
            inner,
            path: Some(path.to_path_buf()),
            map: RwLock::new(map),
            writer: Mutex::new(Some(file)),
            inner_calls: AtomicUsize::new(0),
        })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Number of `embed_batch` calls forwarded to the wrapped provider.
    pub fn inner_calls(&self) -> usize {
        self.inner_calls.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(&self, text: &str) -> String {
        format!(
            "{}:{}",
            self.inner.provider_id(),
            util::sha256_hex(text.as_bytes())
        )
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        check_texts(texts)?;
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();

        let mut miss_texts: Vec<&str> = Vec::new();
        let mut miss_keys: Vec<&str> = Vec::new();
        {
            let map = self.map.read().unwrap();
            for (t, k) in texts.iter().zip(&keys) {
                if !map.contains_key(k) && !miss_keys.contains(&k.as_str()) {
                    miss_texts.push(t);
                    miss_keys.push(k);
                }
            }
        }

        if !miss_texts.is_empty() {
            self.inner_calls.fetch_add(1, Ordering::Relaxed);
            let fresh = self.inner.embed_batch(&miss_texts)?;
            let mut lines = Vec::new();
            {
                let mut map = self.map.write().unwrap();
                for (k, e) in miss_keys.iter().zip(fresh) {
                    if self.path.is_some() {
                        serde_json::to_writer(
                            &mut lines,
                            &CacheLine {
                                key: k.to_string(),
                                values: e.values.clone(),
                            },
                        )
                        .expect("serializable cache line");
                        lines.push(b'\n');
                    }
                    map.insert(k.to_string(), e.values);
                }
            }
            if let Some(file) = self.writer.lock().unwrap().as_mut() {
                file.write_all(&lines)
                    .and_then(|_| file.flush())
                    .map_err(|source| EmbedError::Cache {
                        path: self.path.clone().unwrap_or_default(),
                        source,
                    })?;
            }
        }

        let map = self.map.read().unwrap();
        Ok(keys
            .iter()
            .map(|k| Embedding {
                values: map[k].clone(),
                provider_id: self.inner.provider_id().to_string(),
            })
            .collect())
    }
}
