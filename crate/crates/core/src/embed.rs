//! Multi-vector embeddings and MaxSim late-interaction scoring.
//!
//! A text unit (query, edge, node) is embedded as an `l x d` matrix of
//! unit-norm token vectors. Relevance between a query `Q` and a unit `X` is
//!
//! ```text
//! maxsim(Q, X) = sum_i max_j <Q_i, X_j>
//! ```
//!
//! Two embedders are provided: [`HashEmbedder`], a seeded deterministic
//! stand-in that maps each token to a fixed pseudo-random unit vector, and
//! [`RemoteEmbedder`], a client for the `/embed` service protocol.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{linearize_segment, CorpusError, NodeResolver};
use crate::graph::{EdgeKey, NodeKind, NodeRef};
use crate::remote::{RemoteError, RetryPolicy, ServiceClient};
use crate::text::{tokenize, truncate_to_tokens};

pub const SEP: &str = "[SEP]";
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 256;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text has no tokens: {0:?}")]
    EmptyText(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("multi-vector needs at least one row of dimension >= 1")]
    Shape,
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

/// An `l x d` row-major matrix of unit-norm token vectors, `l >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiVector {
    dim: usize,
    data: Vec<f32>,
}

impl MultiVector {
    /// Wraps rows that are already unit-norm (within 1e-6).
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(EmbedError::Shape);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(EmbedError::DimensionMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            let norm = norm(row);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(EmbedError::NotUnitNorm { row: i, norm });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    /// Scales each row to unit norm. Zero rows are rejected.
    pub fn normalized(rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let unit: Vec<Vec<f32>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let n = norm(r);
                if n == 0.0 || !n.is_finite() {
                    return Err(EmbedError::NotUnitNorm { row: i, norm: n });
                }
                Ok(r.iter().map(|v| (*v as f64 / n) as f32).collect())
            })
            .collect::<Result<_, _>>()?;
        Self::from_rows(&unit)
    }

    /// Rebuilds from raw storage, as read back from an index file.
    pub(crate) fn from_raw(dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(EmbedError::Shape);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of token rows `l`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub(crate) fn raw(&self) -> &[f32] {
        &self.data
    }
}

fn norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Sum over query rows of the best inner product with any row of `doc`.
pub fn maxsim(query: &MultiVector, doc: &MultiVector) -> Result<f64, EmbedError> {
    if query.dim != doc.dim {
        return Err(EmbedError::DimensionMismatch {
            left: query.dim,
            right: doc.dim,
        });
    }
    Ok(query
        .rows()
        .map(|q| {
            doc.rows()
                .map(|x| dot(q, x))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Truncation cap applied to every input text, in tokens.
    fn max_tokens(&self) -> usize;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<MultiVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<MultiVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_owned()])?;
        Ok(out.remove(0))
    }
}

/// Deterministic token-hash embedder.
///
/// Each lowercase token is mapped to a standard-normal vector drawn from a
/// ChaCha stream seeded by `sha256(seed || token)`, then normalized. The same
/// token yields the same row wherever it occurs, so MaxSim between two texts
/// is driven by their token overlap.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
    max_tokens: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize, max_tokens: usize) -> Self {
        Self {
            seed,
            dim,
            max_tokens,
        }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| (v / n) as f32).collect()
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<MultiVector>, EmbedError> {
        texts
            .iter()
            .map(|text| {
                let tokens = tokenize(text);
                if tokens.is_empty() {
                    return Err(EmbedError::EmptyText(text.clone()));
                }
                let data: Vec<f32> = tokens
                    .iter()
                    .take(self.max_tokens)
                    .flat_map(|t| self.token_vector(t))
                    .collect();
                MultiVector::from_raw(self.dim, data)
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<Vec<f32>>>,
    d: usize,
}

/// Client for `POST /embed {texts, model?} -> {vectors, d}`.
///
/// The row count the service returns is authoritative; it may tokenize
/// differently from [`tokenize`].
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: ServiceClient,
    model: Option<String>,
    dim: usize,
    max_tokens: usize,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(
        client: ServiceClient,
        model: Option<String>,
        dim: usize,
        max_tokens: usize,
    ) -> Self {
        Self {
            client,
            model,
            dim,
            max_tokens,
            batch_size: 32,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<MultiVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let truncated: Vec<String> = chunk
                .iter()
                .map(|t| truncate_to_tokens(t, self.max_tokens).to_owned())
                .collect();
            if let Some(empty) = truncated.iter().find(|t| tokenize(t).is_empty()) {
                return Err(EmbedError::EmptyText(empty.clone()));
            }
            let resp: EmbedResponse = self.client.post_json(
                "/embed",
                &EmbedRequest {
                    texts: &truncated,
                    model: self.model.as_deref(),
                },
            )?;
            let protocol = |message: String| {
                EmbedError::Remote(RemoteError::Protocol {
                    url: format!("{}/embed", self.client.base_url()),
                    message,
                })
            };
            if resp.d != self.dim {
                return Err(protocol(format!(
                    "service d={} but handle d={}",
                    resp.d, self.dim
                )));
            }
            if resp.vectors.len() != chunk.len() {
                return Err(protocol(format!(
                    "{} matrices for {} texts",
                    resp.vectors.len(),
                    chunk.len()
                )));
            }
            for matrix in resp.vectors {
                if matrix.is_empty() {
                    return Err(protocol("empty matrix".into()));
                }
                // Services emit f32; tolerate rounding, reject anything else.
                for (i, row) in matrix.iter().enumerate() {
                    let n = norm(row);
                    if row.len() != self.dim || (n - 1.0).abs() > 1e-3 {
                        return Err(protocol(format!("row {i} has len {} norm {n}", row.len())));
                    }
                }
                out.push(MultiVector::normalized(&matrix)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Deterministic,
    Remote,
}

/// Configuration of one embedding role (edge retriever or an expander).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderHandle {
    pub kind: EmbedderKind,
    pub d: usize,
    pub max_tokens: usize,
    /// Set from the pipeline-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_in_flight: usize,
}

impl Default for EmbedderHandle {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Deterministic,
            d: DEFAULT_DIM,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
            endpoint: None,
            model: None,
            max_in_flight: 4,
        }
    }
}

impl EmbedderHandle {
    pub fn validate(&self) -> Result<(), String> {
        if self.d < 4 {
            return Err(format!("embedder d must be >= 4, got {}", self.d));
        }
        if self.max_tokens < 8 {
            return Err(format!(
                "embedder max_tokens must be >= 8, got {}",
                self.max_tokens
            ));
        }
        if self.kind == EmbedderKind::Remote && self.endpoint.is_none() {
            return Err("remote embedder needs an endpoint".into());
        }
        Ok(())
    }

    pub fn build(&self, retry: &RetryPolicy) -> Arc<dyn Embedder> {
        match (self.kind, &self.endpoint) {
            (EmbedderKind::Remote, Some(url)) => Arc::new(RemoteEmbedder::new(
                ServiceClient::new(url, retry.clone(), self.max_in_flight),
                self.model.clone(),
                self.d,
                self.max_tokens,
            )),
            _ => Arc::new(HashEmbedder::new(self.seed, self.d, self.max_tokens)),
        }
    }

    /// Identifies the vector space: indexes built under one fingerprint can
    /// only be queried under the same one.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            EmbedderKind::Deterministic => format!("hash:seed={}:d={}", self.seed, self.d),
            EmbedderKind::Remote => format!(
                "remote:{}:{}:d={}",
                self.endpoint.as_deref().unwrap_or(""),
                self.model.as_deref().unwrap_or(""),
                self.d
            ),
        }
    }
}

/// Edge text `segment [SEP] passage title [SEP] passage body`, cut to
/// `max_tokens` tokens.
pub fn linearize_edge<R: NodeResolver + ?Sized>(
    key: &EdgeKey,
    resolver: &R,
    max_tokens: usize,
) -> Result<String, CorpusError> {
    let segment = resolver
        .segment(&key.segment)
        .ok_or_else(|| CorpusError::UnknownSegment(key.segment.clone()))?;
    let passage = resolver
        .passage(&key.passage)
        .ok_or_else(|| CorpusError::UnknownPassage(key.passage.clone()))?;
    let full = format!(
        "{} {SEP} {} {SEP} {}",
        linearize_segment(segment),
        passage.title,
        passage.body
    );
    Ok(truncate_to_tokens(&full, max_tokens).to_owned())
}

/// Node text: a segment's linearization or `title [SEP] body` for a passage.
pub fn node_text<R: NodeResolver + ?Sized>(
    node: &NodeRef,
    resolver: &R,
    max_tokens: usize,
) -> Result<String, CorpusError> {
    let full = match node.kind {
        NodeKind::TableSegment => linearize_segment(
            resolver
                .segment(&node.id)
                .ok_or_else(|| CorpusError::UnknownSegment(node.id.clone()))?,
        ),
        NodeKind::Passage => crate::corpus::passage_text(
            resolver
                .passage(&node.id)
                .ok_or_else(|| CorpusError::UnknownPassage(node.id.clone()))?,
        ),
    };
    Ok(truncate_to_tokens(&full, max_tokens).to_owned())
}
