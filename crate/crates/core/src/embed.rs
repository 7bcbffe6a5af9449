//! Text embeddings for questions and relation labels.
//!
//! Two providers exist: a remote OpenAI-style `/embeddings` endpoint and a
//! deterministic offline stub. Both sit behind [`Embedder`], which memoizes
//! results in an [`EmbeddingCache`] keyed by the raw text.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::remote::{RemoteClient, RemoteError};

pub const DEFAULT_DIM: usize = 1024;

/// Immutable, cheaply clonable embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("embedding entry {i} is not finite")));
        }
        Ok(Embedding(values.into()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

/// Deterministic pseudo-embedding: a ChaCha20 stream seeded with
/// `SHA-256(seed_le || text)`, entries uniform in [-1, 1], scaled to unit norm.
pub fn stub_embed(seed: u64, text: &str, dim: usize) -> Embedding {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    normalize(&mut v);
    Embedding(v.into())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Whitespace tokens with surrounding punctuation stripped (`_` kept).
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() && c != '_'))
        .filter(|t| !t.is_empty())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StubMode {
    /// One stub vector for the whole text.
    Hashed,
    /// Normalized sum of per-token stub vectors. A single-token text gets
    /// exactly its token vector, so a question that mentions a relation
    /// label has positive cosine with that label.
    BagOfWords,
}

#[derive(Clone, Debug)]
pub struct StubEmbedder {
    pub seed: u64,
    pub dim: usize,
    pub mode: StubMode,
}

impl StubEmbedder {
    pub fn new(seed: u64, dim: usize, mode: StubMode) -> Self {
        StubEmbedder { seed, dim, mode }
    }

    pub fn embed(&self, text: &str) -> Embedding {
        match self.mode {
            StubMode::Hashed => stub_embed(self.seed, text, self.dim),
            StubMode::BagOfWords => {
                let toks: Vec<&str> = tokens(text).collect();
                if toks.len() == 1 {
                    return stub_embed(self.seed, toks[0], self.dim);
                }
                if toks.is_empty() {
                    return stub_embed(self.seed, text, self.dim);
                }
                let mut acc = vec![0.0; self.dim];
                for t in toks {
                    let e = stub_embed(self.seed, t, self.dim);
                    acc.iter_mut().zip(e.as_slice()).for_each(|(a, b)| *a += b);
                }
                normalize(&mut acc);
                Embedding(acc.into())
            }
        }
    }
}

#[derive(Debug)]
pub struct RemoteEmbedder {
    pub client: RemoteClient,
    pub model: String,
    pub dim: usize,
}

impl RemoteEmbedder {
    pub fn new(client: RemoteClient, model: impl Into<String>, dim: usize) -> Self {
        RemoteEmbedder {
            client,
            model: model.into(),
            dim,
        }
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let body = json!({ "model": self.model, "input": texts });
        let resp = self.client.post_json("embeddings", &body).map_err(|e| match e {
            RemoteError::Body(m) => Error::Protocol(m),
            other => Error::Provider(other.to_string()),
        })?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::Protocol("response has no `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "requested {} embeddings, received {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .enumerate()
            .map(|(i, item)| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| Error::Protocol(format!("data[{i}] has no `embedding`")))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| Error::Protocol(format!("data[{i}] has a non-numeric entry")))
                    })
                    .collect::<Result<_>>()?;
                if values.len() != self.dim {
                    return Err(Error::Protocol(format!(
                        "expected dimension {}, server returned {}",
                        self.dim,
                        values.len()
                    )));
                }
                Embedding::new(values).map_err(|e| Error::Protocol(e.to_string()))
            })
            .collect()
    }
}

#[derive(Debug)]
pub enum EmbeddingProvider {
    Stub(StubEmbedder),
    Remote(RemoteEmbedder),
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Stub(s) => s.dim,
            EmbeddingProvider::Remote(r) => r.dim,
        }
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        match self {
            EmbeddingProvider::Stub(s) => Ok(texts.iter().map(|t| s.embed(t)).collect()),
            EmbeddingProvider::Remote(r) => r.embed_batch(texts),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    text: String,
    values: Vec<f64>,
}

/// Text -> embedding memo. Reads are shared; writes take the lock exclusively.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: RwLock<HashMap<String, Embedding>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, text: &str) -> Option<Embedding> {
        self.map.read().unwrap().get(text).cloned()
    }

    /// Keeps the first value stored for a text.
    pub fn insert(&self, text: &str, e: Embedding) -> Embedding {
        self.map.write().unwrap().entry(text.to_owned()).or_insert(e).clone()
    }

    /// Backing file used by [`EmbeddingCache::persist`].
    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Snapshot of all entries sorted by text.
    pub fn entries(&self) -> Vec<(String, Embedding)> {
        let mut v: Vec<_> = self
            .map
            .read()
            .unwrap()
            .iter()
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Writes one JSON record per line, sorted by text.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (text, e) in self.entries() {
            let rec = CacheRecord {
                text,
                values: e.as_slice().to_vec(),
            };
            serde_json::to_writer(&mut w, &rec).expect("cache record serializes");
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::CacheLoad {
                record: i + 1,
                message: e.to_string(),
            })?;
            let e = Embedding::new(rec.values).map_err(|e| Error::CacheLoad {
                record: i + 1,
                message: e.to_string(),
            })?;
            map.insert(rec.text, e);
        }
        Ok(EmbeddingCache {
            map: RwLock::new(map),
            path: Some(path.to_owned()),
        })
    }

    /// Opens `path` if it exists, otherwise starts empty with `path` as the
    /// backing file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() {
            Self::load(path)
        } else {
            Ok(EmbeddingCache {
                map: RwLock::default(),
                path: Some(path.to_owned()),
            })
        }
    }

    pub fn persist(&self) -> Result<()> {
        match &self.path {
            Some(p) => self.save(p),
            None => Ok(()),
        }
    }
}

/// Provider plus cache.
#[derive(Debug)]
pub struct Embedder {
    provider: EmbeddingProvider,
    cache: EmbeddingCache,
}

impl Embedder {
    pub fn new(provider: EmbeddingProvider, cache: EmbeddingCache) -> Self {
        Embedder { provider, cache }
    }

    pub fn stub(seed: u64, dim: usize, mode: StubMode) -> Self {
        Self::new(
            EmbeddingProvider::Stub(StubEmbedder::new(seed, dim, mode)),
            EmbeddingCache::new(),
        )
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_all(&[text])?.remove(0))
    }

    /// Embeds `texts` in order, fetching only cache misses (in one batch).
    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if let Some(t) = texts.iter().find(|t| t.is_empty()) {
            return Err(Error::Input(format!("cannot embed empty text {t:?}")));
        }
        let mut missing: Vec<&str> = Vec::new();
        for &t in texts {
            if self.cache.get(t).is_none() && !missing.contains(&t) {
                missing.push(t);
            }
        }
        if !missing.is_empty() {
            let fetched = self.provider.embed_batch(&missing)?;
            for (t, e) in missing.iter().zip(fetched) {
                if e.dim() != self.dim() {
                    return Err(Error::Protocol(format!(
                        "provider returned dimension {} for {t:?}, declared {}",
                        e.dim(),
                        self.dim()
                    )));
                }
                self.cache.insert(t, e);
            }
        }
        Ok(texts
            .iter()
            .map(|t| self.cache.get(t).expect("inserted above"))
            .collect())
    }
}
