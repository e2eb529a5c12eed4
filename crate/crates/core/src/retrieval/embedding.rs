//! Text embedding providers: the contract, a seeded mock, a per-run memo,
//! and the remote HTTP adapter.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{EndpointConfig, HttpError, JsonClient};
use crate::label::normalize;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding endpoint unavailable: {0}")]
    Unavailable(#[from] HttpError),
    #[error("embedding response malformed: {0}")]
    Malformed(String),
}

/// Maps text to unit vectors of a fixed dimension.
///
/// Implementations must be deterministic per instance and safe to call
/// from several threads.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;

    /// Short human-readable identity recorded in run metadata.
    fn describe(&self) -> String;
}

/// Deterministic, network-free embedder.
///
/// The normalized text is hashed together with the seed and the digest
/// seeds a ChaCha stream that fills the vector, which is then normalized.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    seed: u64,
}

pub fn mock_embedding_provider(dimension: usize, seed: u64) -> MockEmbedder {
    MockEmbedder::new(dimension, seed)
}

impl MockEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 2, "mock embedder needs dimension >= 2");
        Self { dimension, seed }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(normalize(text).as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        loop {
            let v: Vec<f64> = (0..self.dimension)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn describe(&self) -> String {
        format!("mock(dimension={}, seed={})", self.dimension, self.seed)
    }
}

/// In-memory cache in front of another provider, keyed by exact text.
pub struct MemoEmbedder<P> {
    inner: P,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<P: EmbeddingProvider> MemoEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for MemoEmbedder<P> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            let mut missing: Vec<String> = texts
                .iter()
                .filter(|t| !cache.contains_key(*t))
                .cloned()
                .collect();
            missing.sort();
            missing.dedup();
            missing
        };
        if !missing.is_empty() {
            let vectors = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (text, v) in missing.into_iter().zip(vectors) {
                cache.insert(text, v);
            }
        }
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        (**self).embed(texts)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        (**self).embed(texts)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote embedder speaking `{texts}` → `{vectors}`.
///
/// Returned vectors are re-normalized so the unit-norm contract holds even
/// when the service returns raw embeddings.
pub struct HttpEmbedder {
    client: JsonClient,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(endpoint: EndpointConfig, dimension: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint),
            dimension,
        }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp: EmbedResponse = self.client.post_json(&EmbedRequest { texts })?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dimension {
                    return Err(EmbeddingError::Malformed(format!(
                        "expected dimension {}, got {}",
                        self.dimension,
                        v.len()
                    )));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || norm == 0.0 {
                    return Err(EmbeddingError::Malformed("zero or non-finite vector".into()));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("http({})", self.client.config().url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic_and_unit_norm() {
        let m = mock_embedding_provider(16, 7);
        let a = m.embed_one("lymphoma vs. metastasis");
        assert_eq!(a, m.embed_one("lymphoma vs. metastasis"));
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn mock_normalizes_text_before_hashing() {
        let m = mock_embedding_provider(8, 1);
        assert_eq!(
            m.embed_one("lymphoma vs. metastasis"),
            m.embed_one("Lymphoma  vs. Metastasis")
        );
    }

    #[test]
    fn mock_depends_on_seed() {
        assert_ne!(
            MockEmbedder::new(8, 1).embed_one("x"),
            MockEmbedder::new(8, 2).embed_one("x")
        );
    }

    #[test]
    fn memo_returns_inner_vectors() {
        let memo = MemoEmbedder::new(MockEmbedder::new(4, 3));
        let texts = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        let out = memo.embed(&texts).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(out[1], MockEmbedder::new(4, 3).embed_one("b"));
        assert_eq!(memo.cached(), 2);
    }
}
