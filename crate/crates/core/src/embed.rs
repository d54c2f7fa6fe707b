//! Text embedders.
//!
//! Two implementations sit behind the [`Embedder`] trait:
//!
//! - [`LocalHashEmbedder`]: hashed bag-of-words. Text is lowercased and split
//!   on runs of non-alphanumeric characters; each token adds 1.0 at
//!   `fnv1a64(token) % dim`, and the result is L2-normalized. Fully
//!   deterministic and offline.
//! - [`RemoteEmbedder`]: calls an embeddings HTTP endpoint
//!   (`{"model", "input"}` in, `{"data":[{"embedding"}]}` out) and caches
//!   vectors by a content hash of `(model, text)`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MIN_DIM: usize = 8;
pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A dense embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
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
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * factor).collect())
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding request failed{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Http { status: Option<u16>, message: String },
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
    #[error("batch item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Cosine similarity, `dot(a, b) / (|a| |b|)`, or 0.0 when either norm is 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(cosine_with_norms(a.values(), b.values(), a.norm(), b.norm()))
}

/// Cosine with precomputed norms. Callers guarantee equal lengths.
pub(crate) fn cosine_with_norms(a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the embedding space; indexes refuse vectors from a
    /// different fingerprint.
    fn fingerprint(&self) -> String;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    /// Element-wise [`Embedder::embed`]; the first failure aborts the batch
    /// and carries its index.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EmbedError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    LocalHash,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::local_hash(DEFAULT_DIM)
    }
}

impl EmbedderSpec {
    pub fn local_hash(dim: usize) -> Self {
        EmbedderSpec {
            kind: EmbedderKind::LocalHash,
            dim,
            endpoint_url: None,
            model_name: None,
            auth_env_var: None,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < MIN_DIM {
            return Err(EmbedError::InvalidSpec(format!(
                "dim must be at least {MIN_DIM}, got {}",
                self.dim
            )));
        }
        if self.kind == EmbedderKind::RemoteHttp && self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(EmbedError::InvalidSpec(
                "remote_http embedder requires endpoint_url".into(),
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        match self.kind {
            EmbedderKind::LocalHash => format!("local_hash:fnv1a64:{}", self.dim),
            EmbedderKind::RemoteHttp => {
                format!("remote_http:{}:{}", self.model_name.as_deref().unwrap_or(""), self.dim)
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::LocalHash => Arc::new(LocalHashEmbedder::new(self.dim)?),
            EmbedderKind::RemoteHttp => Arc::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

/// Deterministic hashed bag-of-words embedder.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        EmbedderSpec::local_hash(dim).validate()?;
        Ok(LocalHashEmbedder { dim })
    }
}

/// Lowercased alphanumeric runs.
pub fn hash_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Embedder for LocalHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        EmbedderSpec::local_hash(self.dim).fingerprint()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut values = vec![0.0; self.dim];
        for token in hash_tokens(text) {
            let slot = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            values[slot] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Embedding(values))
    }
}

/// Content-addressed embedding cache: key is SHA-256 over
/// `model_name || 0x00 || text`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: Vec<f64>,
}

impl EmbeddingCache {
    pub fn key(model: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.entries.read().expect("cache lock poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: String, vector: Vec<f64>) {
        self.entries.write().expect("cache lock poisoned").insert(key, vector);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Load a JSON-lines cache file. A missing file yields an empty cache.
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let cache = EmbeddingCache::default();
        let file = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(cache_err(path, e)),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| cache_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine =
                serde_json::from_str(&line).map_err(|e| cache_err(path, format!("line {}: {e}", lineno + 1)))?;
            cache.insert(entry.key, entry.vector);
        }
        Ok(cache)
    }

    /// Write all entries sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let entries = self.entries.read().expect("cache lock poisoned");
        let mut keys: Vec<&String> = entries.keys().collect();
        keys.sort();
        let tmp = path.with_extension("tmp");
        let mut out = BufWriter::new(fs::File::create(&tmp).map_err(|e| cache_err(path, e))?);
        for key in keys {
            let line = CacheLine {
                key: key.clone(),
                vector: entries[key].clone(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| cache_err(path, e))?;
            out.write_all(b"\n").map_err(|e| cache_err(path, e))?;
        }
        out.flush().map_err(|e| cache_err(path, e))?;
        drop(out);
        fs::rename(&tmp, path).map_err(|e| cache_err(path, e))
    }
}

fn cache_err(path: &Path, e: impl ToString) -> EmbedError {
    EmbedError::Cache {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Embedder backed by an embeddings HTTP API.
pub struct RemoteEmbedder {
    spec: EmbedderSpec,
    client: reqwest::blocking::Client,
    cache: Arc<EmbeddingCache>,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("spec", &self.spec)
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl RemoteEmbedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self, EmbedError> {
        Self::with_cache(spec, Arc::new(EmbeddingCache::default()))
    }

    pub fn with_cache(spec: EmbedderSpec, cache: Arc<EmbeddingCache>) -> Result<Self, EmbedError> {
        spec.validate()?;
        if spec.kind != EmbedderKind::RemoteHttp {
            return Err(EmbedError::InvalidSpec("expected a remote_http spec".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Http {
                status: None,
                message: e.to_string(),
            })?;
        Ok(RemoteEmbedder { spec, client, cache })
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.cache
    }

    fn model(&self) -> &str {
        self.spec.model_name.as_deref().unwrap_or("")
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = self.spec.endpoint_url.as_deref().unwrap_or_default();
        let mut req = self.client.post(url).json(&serde_json::json!({
            "model": self.model(),
            "input": texts,
        }));
        if let Some(var) = &self.spec.auth_env_var {
            let token = std::env::var(var).map_err(|_| EmbedError::MissingCredentials(var.clone()))?;
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| EmbedError::Http {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(EmbedError::Http {
                status: Some(status.as_u16()),
                message: body,
            });
        }
        let parsed: EmbeddingsResponse = resp.json().map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() == self.spec.dim {
                    Ok(d.embedding)
                } else {
                    Err(EmbedError::DimMismatch {
                        expected: self.spec.dim,
                        found: d.embedding.len(),
                    })
                }
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text]).map_err(|e| match e {
            EmbedError::Batch { source, .. } => *source,
            other => other,
        })?;
        Ok(out.remove(0))
    }

    /// Cached texts are served locally; the rest go out in one request.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(self.model(), t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = keys.iter().map(|k| self.cache.get(k)).collect();
        // first position of each distinct uncached key
        let mut seen = HashSet::new();
        let missing: Vec<usize> = (0..texts.len())
            .filter(|&i| out[i].is_none() && seen.insert(keys[i].as_str()))
            .collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fetched = self.request(&batch).map_err(|e| EmbedError::Batch {
                index: missing[0],
                source: Box::new(e),
            })?;
            for (&i, vector) in missing.iter().zip(fetched) {
                self.cache.insert(keys[i].clone(), vector);
            }
            for (slot, key) in out.iter_mut().zip(&keys) {
                if slot.is_none() {
                    *slot = self.cache.get(key);
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|v| Embedding(v.expect("every slot filled")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"b"), 0xaf63df4c8601f1a5);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = LocalHashEmbedder::new(32).unwrap();
        assert_eq!(e.embed("").unwrap(), Embedding::zeros(32));
        assert_eq!(e.embed(" ,;! ").unwrap(), Embedding::zeros(32));
    }

    #[test]
    fn hand_computed_a_a_b() {
        // fnv1a64("a") % 8 == 4, fnv1a64("b") % 8 == 5
        let v = LocalHashEmbedder::new(8).unwrap().embed("a a b").unwrap();
        let s5 = 5f64.sqrt();
        let mut expected = [0.0; 8];
        expected[4] = 2.0 / s5;
        expected[5] = 1.0 / s5;
        assert_eq!(v.values().iter().filter(|x| **x != 0.0).count(), 2);
        for (got, want) in v.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        let e = LocalHashEmbedder::new(256).unwrap();
        let a = e.embed("Alabama statute").unwrap();
        let b = e.embed("Alabama statute").unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a, e.embed("ALABAMA, statute!").unwrap());
    }

    #[test]
    fn cosine_cases() {
        let v = Embedding::new(vec![0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&Embedding::zeros(3), &v).unwrap(), 0.0);
        let x = Embedding::new(vec![1.0, 0.0, 0.0]);
        let y = Embedding::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        assert!(matches!(
            cosine(&x, &Embedding::zeros(2)),
            Err(EmbedError::DimMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(EmbedderSpec::local_hash(7).validate().is_err());
        assert!(EmbedderSpec::local_hash(8).validate().is_ok());
        let remote = EmbedderSpec {
            kind: EmbedderKind::RemoteHttp,
            dim: 16,
            endpoint_url: Some("  ".into()),
            model_name: Some("m".into()),
            auth_env_var: None,
        };
        assert!(remote.validate().is_err());
    }

    #[test]
    fn batch_matches_singletons() {
        let e = LocalHashEmbedder::new(64).unwrap();
        assert!(e.embed_batch(&[]).unwrap().is_empty());
        assert_eq!(e.embed_batch(&["x"]).unwrap(), vec![e.embed("x").unwrap()]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = EmbeddingCache::default();
        cache.insert(EmbeddingCache::key("m", "hello"), vec![0.1, 0.2, 1.0 / 3.0]);
        cache.save(&path).unwrap();
        let back = EmbeddingCache::load(&path).unwrap();
        assert_eq!(
            back.get(&EmbeddingCache::key("m", "hello")),
            Some(vec![0.1, 0.2, 1.0 / 3.0])
        );
        assert_ne!(EmbeddingCache::key("m", "hello"), EmbeddingCache::key("n", "hello"));
        assert!(EmbeddingCache::load(&dir.path().join("absent")).unwrap().is_empty());
    }
}
