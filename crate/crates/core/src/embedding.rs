//! Text embedders: a remote embeddings endpoint and a deterministic
//! token-bag mock for offline runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{JsonClient, RetryPolicy, TransportError};
use crate::parallel::bounded_map;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder parameters: {0}")]
    InvalidParameters(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("embedding for item {index} has {got} values, embedder dimension is {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding for item {index} contains non-finite values")]
    NonFinite { index: usize },
    #[error("response has no embedding for item {index}")]
    MissingItem { index: usize },
}

/// A dense vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Option<Self> {
        (!values.is_empty() && values.iter().all(|v| v.is_finite())).then_some(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Some embedders use separate encoders for queries and documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    Query,
    #[default]
    Document,
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn config(&self) -> EmbedderConfig;

    fn embed_as(&self, text: &str, role: EmbedRole) -> Result<EmbeddingVector, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed_as(text, EmbedRole::Document)
    }

    /// Embed many texts; slot `i` holds the outcome for `texts[i]`. The outer
    /// error is reserved for transport failures that abort the whole batch.
    fn embed_batch_as(
        &self,
        texts: &[String],
        role: EmbedRole,
    ) -> Result<Vec<Result<EmbeddingVector, EmbedError>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            match self.embed_as(t, role) {
                Err(EmbedError::Transport(e)) => return Err(EmbedError::Transport(e)),
                r => out.push(r),
            }
        }
        Ok(out)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Result<EmbeddingVector, EmbedError>>, EmbedError> {
        self.embed_batch_as(texts, EmbedRole::Document)
    }
}

/// Serializable description of an embedder, recorded in run manifests and
/// store metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Mock {
        seed: u64,
        dim: usize,
    },
    Remote {
        url: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query_model: Option<String>,
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_chars: Option<usize>,
    },
}

impl EmbedderConfig {
    /// Instantiate. The remote API key is passed separately so it never
    /// lands in a serialized config.
    pub fn build(&self, api_key: Option<String>, jobs: usize) -> Result<Box<dyn Embedder>, EmbedError> {
        Ok(match self {
            EmbedderConfig::Mock { seed, dim } => Box::new(MockEmbedder::new(*seed, *dim)?),
            EmbedderConfig::Remote {
                url,
                model,
                query_model,
                dim,
                max_chars,
            } => {
                let mut e = RemoteEmbedder::new(url, model, *dim, api_key)?;
                e.query_model = query_model.clone();
                e.max_chars = *max_chars;
                e.jobs = jobs.max(1);
                Box::new(e)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbedderConfig::Mock { dim, .. } | EmbedderConfig::Remote { dim, .. } => *dim,
        }
    }
}

fn truncate_chars(text: &str, max_chars: Option<usize>) -> &str {
    match max_chars {
        Some(max) => match text.char_indices().nth(max) {
            Some((byte, _)) => {
                tracing::warn!(max_chars = max, "input exceeds embedder context limit, truncating");
                &text[..byte]
            }
            None => text,
        },
        None => text,
    }
}

/// Deterministic bag-of-tokens embedder.
///
/// Text is lower-cased and split on non-alphanumeric characters; each token
/// is hashed (seeded) into one of `dim` buckets, bucket counts are
/// L2-normalised. Text without tokens maps to the basis vector e_0.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    name: String,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self, EmbedError> {
        if dim < 2 {
            return Err(EmbedError::InvalidParameters(format!("mock dimension must be >= 2, got {dim}")));
        }
        Ok(Self {
            seed,
            dim,
            name: format!("mock-{seed}-{dim}"),
        })
    }

    /// Bucket that `token` (already lower-cased) hashes to.
    pub fn bucket(&self, token: &str) -> usize {
        (seeded_hash(self.seed, token.as_bytes()) % self.dim as u64) as usize
    }
}

/// Lower-cased alphanumeric tokens, as seen by [`MockEmbedder`].
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    // FNV-1a over the seed and the token, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl Embedder for MockEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn config(&self) -> EmbedderConfig {
        EmbedderConfig::Mock {
            seed: self.seed,
            dim: self.dim,
        }
    }

    fn embed_as(&self, text: &str, _role: EmbedRole) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0f64; self.dim];
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        let values = if norm == 0.0 {
            let mut e0 = vec![0f32; self.dim];
            e0[0] = 1.0;
            e0
        } else {
            counts.iter().map(|c| (c / norm) as f32).collect()
        };
        Ok(EmbeddingVector(values))
    }
}

/// Client for a generic embeddings endpoint:
/// `POST {model, input: [texts]}` answered by `{data: [{index, embedding}]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    model: String,
    /// Model used for [`EmbedRole::Query`] when the provider has a separate
    /// query encoder.
    pub query_model: Option<String>,
    dim: usize,
    /// Context limit in characters; longer inputs are truncated.
    pub max_chars: Option<usize>,
    /// Inputs per request.
    pub batch_size: usize,
    /// Concurrent requests in a batch call.
    pub jobs: usize,
    client: JsonClient,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(url: &str, model: &str, dim: usize, api_key: Option<String>) -> Result<Self, EmbedError> {
        Self::with_retry(url, model, dim, api_key, RetryPolicy::default())
    }

    pub fn with_retry(
        url: &str,
        model: &str,
        dim: usize,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidParameters("dimension must be positive".into()));
        }
        Ok(Self {
            url: url.to_string(),
            model: model.to_string(),
            query_model: None,
            dim,
            max_chars: None,
            batch_size: 64,
            jobs: 1,
            client: JsonClient::new(api_key, retry, Duration::from_secs(120)),
        })
    }

    fn model_for(&self, role: EmbedRole) -> &str {
        match (role, &self.query_model) {
            (EmbedRole::Query, Some(q)) => q,
            _ => &self.model,
        }
    }

    /// One request for a slice of texts; `offset` is the index of the first
    /// text in the caller's batch, used in per-item errors.
    fn request(
        &self,
        texts: &[String],
        offset: usize,
        role: EmbedRole,
    ) -> Result<Vec<Result<EmbeddingVector, EmbedError>>, TransportError> {
        let input: Vec<&str> = texts.iter().map(|t| truncate_chars(t, self.max_chars)).collect();
        let resp: EmbeddingsResponse = self.client.post(
            &self.url,
            &EmbeddingsRequest {
                model: self.model_for(role),
                input,
            },
        )?;
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for d in resp.data {
            if let Some(slot) = slots.get_mut(d.index) {
                *slot = Some(d.embedding);
            }
        }
        Ok(slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let index = offset + i;
                let v = v.ok_or(EmbedError::MissingItem { index })?;
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        index,
                        expected: self.dim,
                        got: v.len(),
                    });
                }
                let values: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
                EmbeddingVector::new(values).ok_or(EmbedError::NonFinite { index })
            })
            .collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn config(&self) -> EmbedderConfig {
        EmbedderConfig::Remote {
            url: self.url.clone(),
            model: self.model.clone(),
            query_model: self.query_model.clone(),
            dim: self.dim,
            max_chars: self.max_chars,
        }
    }

    fn embed_as(&self, text: &str, role: EmbedRole) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.request(&[text.to_string()], 0, role)?
            .pop()
            .unwrap_or(Err(EmbedError::MissingItem { index: 0 }))
    }

    fn embed_batch_as(
        &self,
        texts: &[String],
        role: EmbedRole,
    ) -> Result<Vec<Result<EmbeddingVector, EmbedError>>, EmbedError> {
        let batches: Vec<(usize, &[String])> = texts
            .chunks(self.batch_size.max(1))
            .enumerate()
            .map(|(i, c)| (i * self.batch_size.max(1), c))
            .collect();
        let responses = bounded_map(&batches, self.jobs, |(offset, chunk)| {
            // Empty strings never reach the wire.
            let (send, idx): (Vec<String>, Vec<usize>) = chunk
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.is_empty())
                .map(|(i, t)| (t.clone(), i))
                .unzip();
            let got = if send.is_empty() {
                Vec::new()
            } else {
                self.request(&send, 0, role)?
            };
            let mut out: Vec<Result<EmbeddingVector, EmbedError>> =
                chunk.iter().map(|_| Err(EmbedError::EmptyText)).collect();
            for (r, i) in got.into_iter().zip(idx) {
                out[i] = r.map_err(|e| reindex(e, offset + i));
            }
            Ok::<_, TransportError>(out)
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in responses {
            out.extend(r?);
        }
        Ok(out)
    }
}

fn reindex(e: EmbedError, index: usize) -> EmbedError {
    match e {
        EmbedError::DimensionMismatch { expected, got, .. } => EmbedError::DimensionMismatch { index, expected, got },
        EmbedError::NonFinite { .. } => EmbedError::NonFinite { index },
        EmbedError::MissingItem { .. } => EmbedError::MissingItem { index },
        other => other,
    }
}
