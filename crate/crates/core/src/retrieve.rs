//! Edge index, top-k1 MaxSim retrieval, top-k2 reranking, and integration
//! of the surviving edges into the candidate subgraph.

use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, NodeResolver};
use crate::embed::{linearize_edge, maxsim, EmbedError, Embedder, MultiVector};
use crate::graph::{
    rank_order, BipartiteGraph, EdgeKey, GraphError, NodeKind, NodeRef, ScoredEdge,
};
use crate::remote::{RemoteError, RetryPolicy, ServiceClient};

pub const DEFAULT_K1: usize = 400;
pub const DEFAULT_K2: usize = 100;

const MAGIC: &[u8; 8] = b"BGIDX\x00\x00\x01";
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("no edges; run linker")]
    NoEdges,
    #[error("query is empty")]
    EmptyQuery,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("embedding failed for {key}: {source}")]
    EmbedAt {
        key: String,
        #[source]
        source: EmbedError,
    },
    #[error("index has d={index} but embedder has d={embedder}")]
    DimMismatch { index: usize, embedder: usize },
    #[error("reranker returned {got} scores for {expected} candidates")]
    RerankShape { expected: usize, got: usize },
    #[error("bad index file: {0}")]
    Format(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Key type stored in a [`VectorIndex`], serialized as two strings.
pub trait IndexKey: Clone + Ord + Send + Sync + std::fmt::Display {
    fn to_parts(&self) -> (&str, &str);
    fn from_parts(a: String, b: String) -> Result<Self, RetrieveError>;
}

impl IndexKey for EdgeKey {
    fn to_parts(&self) -> (&str, &str) {
        (&self.segment, &self.passage)
    }

    fn from_parts(a: String, b: String) -> Result<Self, RetrieveError> {
        Ok(EdgeKey::new(a, b))
    }
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            NodeKind::TableSegment => write!(f, "segment:{}", self.id),
            NodeKind::Passage => write!(f, "passage:{}", self.id),
        }
    }
}

impl IndexKey for NodeRef {
    fn to_parts(&self) -> (&str, &str) {
        let tag = match self.kind {
            NodeKind::TableSegment => "segment",
            NodeKind::Passage => "passage",
        };
        (tag, &self.id)
    }

    fn from_parts(a: String, b: String) -> Result<Self, RetrieveError> {
        match a.as_str() {
            "segment" => Ok(NodeRef::segment(b)),
            "passage" => Ok(NodeRef::passage(b)),
            other => Err(RetrieveError::Format(format!("unknown node tag {other:?}"))),
        }
    }
}

/// Exact multi-vector index: every entry is scored on every search.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<K> {
    dim: usize,
    fingerprint: String,
    entries: Vec<(K, MultiVector)>,
}

/// One entry per data-graph edge, in key order.
pub type EdgeIndex = VectorIndex<EdgeKey>;
/// One entry per node of a single kind, in id order.
pub type NodeIndex = VectorIndex<NodeRef>;

impl<K: IndexKey> VectorIndex<K> {
    /// Embeds `(key, text)` items; entries end up sorted by key.
    pub fn build(
        mut items: Vec<(K, String)>,
        embedder: &dyn Embedder,
        fingerprint: &str,
    ) -> Result<Self, RetrieveError> {
        items.sort_by(|a, b| a.0.cmp(&b.0));
        let chunks: Vec<Vec<MultiVector>> = items
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| {
                let texts: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
                embedder.embed_batch(&texts).map_err(|source| {
                    // Find the entry that actually fails so the error can name it.
                    let key = chunk
                        .iter()
                        .find(|(_, t)| embedder.embed(t).is_err())
                        .unwrap_or(&chunk[0])
                        .0
                        .to_string();
                    RetrieveError::EmbedAt { key, source }
                })
            })
            .collect::<Result<_, _>>()?;
        let entries = items
            .into_iter()
            .map(|(k, _)| k)
            .zip(chunks.into_iter().flatten())
            .collect();
        Ok(Self {
            dim: embedder.dim(),
            fingerprint: fingerprint.to_owned(),
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(K, MultiVector)] {
        &self.entries
    }

    /// Scores every entry against `query` (optionally filtered) and returns
    /// the top `k` by score desc, key asc.
    pub fn search(
        &self,
        query: &MultiVector,
        k: usize,
        filter: impl Fn(&K) -> bool + Sync,
    ) -> Result<Vec<(K, f64)>, RetrieveError> {
        if query.dim() != self.dim {
            return Err(RetrieveError::DimMismatch {
                index: self.dim,
                embedder: query.dim(),
            });
        }
        let mut scored: Vec<(K, f64)> = self
            .entries
            .par_iter()
            .filter(|(key, _)| filter(key))
            .map(|(key, mv)| maxsim(query, mv).map(|s| (key.clone(), s)))
            .collect::<Result<_, _>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), RetrieveError> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        write_str(&mut out, &self.fingerprint)?;
        out.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for (key, mv) in &self.entries {
            let (a, b) = key.to_parts();
            write_str(&mut out, a)?;
            write_str(&mut out, b)?;
            out.write_u32::<LittleEndian>(mv.len() as u32)?;
            for v in mv.raw() {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, RetrieveError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrieveError::Format("bad magic".into()));
        }
        let dim = input.read_u32::<LittleEndian>()? as usize;
        let fingerprint = read_str(&mut input)?;
        let n = input.read_u64::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let key = K::from_parts(read_str(&mut input)?, read_str(&mut input)?)?;
            let l = input.read_u32::<LittleEndian>()? as usize;
            let mut data = vec![0f32; l * dim];
            input.read_f32_into::<LittleEndian>(&mut data)?;
            let mv = MultiVector::from_raw(dim, data)
                .map_err(|e| RetrieveError::Format(format!("entry {key}: {e}")))?;
            entries.push((key, mv));
        }
        Ok(Self {
            dim,
            fingerprint,
            entries,
        })
    }
}

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_str<R: Read>(input: &mut R) -> Result<String, RetrieveError> {
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| RetrieveError::Format(e.to_string()))
}

/// Linearizes and embeds every edge of the data graph.
pub fn build_edge_index<R: NodeResolver + Sync + ?Sized>(
    data_graph: &BipartiteGraph,
    resolver: &R,
    embedder: &dyn Embedder,
    fingerprint: &str,
) -> Result<EdgeIndex, RetrieveError> {
    if data_graph.edge_count() == 0 {
        return Err(RetrieveError::NoEdges);
    }
    let items = data_graph
        .edge_keys()
        .map(|k| {
            Ok((
                k.clone(),
                linearize_edge(k, resolver, embedder.max_tokens())?,
            ))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    VectorIndex::build(items, embedder, fingerprint)
}

/// The `k1` edges with the highest MaxSim against the query.
pub fn retrieve_edges(
    query: &str,
    index: &EdgeIndex,
    embedder: &dyn Embedder,
    k1: usize,
) -> Result<Vec<ScoredEdge>, RetrieveError> {
    if query.trim().is_empty() {
        return Err(RetrieveError::EmptyQuery);
    }
    if k1 == 0 {
        return Err(RetrieveError::ZeroK);
    }
    let q = embedder.embed(query)?;
    Ok(index
        .search(&q, k1, |_| true)?
        .into_iter()
        .map(|(k, s)| ScoredEdge::new(k.segment, k.passage, s))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankCandidate {
    pub text: String,
    /// First-stage score, returned unchanged by the passthrough reranker.
    pub prior: f64,
}

pub trait Reranker: Send + Sync {
    /// Whether candidate texts are used; lets callers skip building them.
    fn needs_text(&self) -> bool {
        true
    }

    /// One score per candidate, positionally aligned.
    fn score(&self, query: &str, candidates: &[RerankCandidate])
        -> Result<Vec<f64>, RetrieveError>;
}

/// Keeps first-stage scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassthroughReranker;

impl Reranker for PassthroughReranker {
    fn needs_text(&self) -> bool {
        false
    }

    fn score(
        &self,
        _query: &str,
        candidates: &[RerankCandidate],
    ) -> Result<Vec<f64>, RetrieveError> {
        Ok(candidates.iter().map(|c| c.prior).collect())
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    candidates: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

/// Client for `POST /rerank {query, candidates, model?} -> {scores}`.
#[derive(Debug)]
pub struct RemoteReranker {
    client: ServiceClient,
    model: Option<String>,
}

impl RemoteReranker {
    pub fn new(client: ServiceClient, model: Option<String>) -> Self {
        Self { client, model }
    }
}

impl Reranker for RemoteReranker {
    fn score(
        &self,
        query: &str,
        candidates: &[RerankCandidate],
    ) -> Result<Vec<f64>, RetrieveError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let resp: RerankResponse = self.client.post_json(
            "/rerank",
            &RerankRequest {
                query,
                candidates: candidates.iter().map(|c| c.text.as_str()).collect(),
                model: self.model.as_deref(),
            },
        )?;
        if resp.scores.len() != candidates.len() {
            return Err(RetrieveError::RerankShape {
                expected: candidates.len(),
                got: resp.scores.len(),
            });
        }
        if let Some(bad) = resp.scores.iter().find(|s| !s.is_finite()) {
            return Err(RetrieveError::Remote(RemoteError::Protocol {
                url: format!("{}/rerank", self.client.base_url()),
                message: format!("non-finite score {bad}"),
            }));
        }
        Ok(resp.scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    #[default]
    Passthrough,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerHandle {
    pub kind: RerankerKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl RerankerHandle {
    pub fn validate(&self) -> Result<(), String> {
        if self.kind == RerankerKind::Remote && self.endpoint.is_none() {
            return Err("remote reranker needs an endpoint".into());
        }
        Ok(())
    }

    pub fn build(&self, retry: &RetryPolicy, max_in_flight: usize) -> Arc<dyn Reranker> {
        match (self.kind, &self.endpoint) {
            (RerankerKind::Remote, Some(url)) => Arc::new(RemoteReranker::new(
                ServiceClient::new(url, retry.clone(), max_in_flight),
                self.model.clone(),
            )),
            _ => Arc::new(PassthroughReranker),
        }
    }
}

/// Re-scores edges with `reranker`, re-sorts, and keeps the top `k2`.
pub fn rerank_edges<R: NodeResolver + ?Sized>(
    query: &str,
    edges: &[ScoredEdge],
    resolver: &R,
    reranker: &dyn Reranker,
    k2: usize,
    max_tokens: usize,
) -> Result<Vec<ScoredEdge>, RetrieveError> {
    if k2 == 0 {
        return Err(RetrieveError::ZeroK);
    }
    let candidates = edges
        .iter()
        .map(|e| {
            let text = if reranker.needs_text() {
                linearize_edge(&e.key(), resolver, max_tokens)?
            } else {
                String::new()
            };
            Ok(RerankCandidate {
                text,
                prior: e.score,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let scores = reranker.score(query, &candidates)?;
    if scores.len() != edges.len() {
        return Err(RetrieveError::RerankShape {
            expected: edges.len(),
            got: scores.len(),
        });
    }
    let mut out: Vec<ScoredEdge> = edges
        .iter()
        .zip(scores)
        .map(|(e, s)| ScoredEdge::new(&e.segment, &e.passage, s))
        .collect();
    out.sort_by(rank_order);
    out.truncate(k2);
    Ok(out)
}

/// Scores edges that did not come out of first-stage retrieval (expansion
/// and aggregation edges). The first-stage MaxSim under `edge_embedder` is
/// the prior, so a passthrough reranker keeps them on the same scale as
/// retrieved edges.
pub fn score_new_edges<R: NodeResolver + Sync + ?Sized>(
    query: &str,
    query_vec: &MultiVector,
    keys: &[EdgeKey],
    resolver: &R,
    edge_embedder: &dyn Embedder,
    reranker: &dyn Reranker,
) -> Result<Vec<ScoredEdge>, RetrieveError> {
    if keys.is_empty() {
        return Ok(Vec::new());
    }
    let texts = keys
        .iter()
        .map(|k| linearize_edge(k, resolver, edge_embedder.max_tokens()))
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let vectors = edge_embedder.embed_batch(&texts)?;
    let candidates = texts
        .into_iter()
        .zip(&vectors)
        .map(|(text, mv)| {
            Ok(RerankCandidate {
                text,
                prior: maxsim(query_vec, mv)?,
            })
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    let scores = reranker.score(query, &candidates)?;
    if scores.len() != keys.len() {
        return Err(RetrieveError::RerankShape {
            expected: keys.len(),
            got: scores.len(),
        });
    }
    Ok(keys
        .iter()
        .zip(scores)
        .map(|(k, s)| ScoredEdge::new(&k.segment, &k.passage, s))
        .collect())
}

/// Merges reranked edges into the candidate subgraph; the reranker scores
/// become its score map.
pub fn integrate(edges: Vec<ScoredEdge>) -> Result<BipartiteGraph, RetrieveError> {
    Ok(BipartiteGraph::merge_edges(edges)?)
}
