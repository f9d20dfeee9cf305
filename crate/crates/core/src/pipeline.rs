//! One query through the three stages: edge retrieval and reranking into the
//! candidate graph, node expansion, and star-wise refinement, with a trace of
//! what each stage contributed.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::config::{PipelineConfig, StageToggles};
use crate::corpus::{Corpus, CorpusError, NodeResolver};
use crate::embed::{linearize_edge, node_text, EmbedError, Embedder};
use crate::expand::{Expander, SeedCandidate};
use crate::graph::{NodeRef, ScoredEdge};
use crate::linker::Linkage;
use crate::refine::{
    is_aggregation_edge, rank_output, RefineError, RefineInput, Refiner, RefinerVerdict, RowLinks,
};
use crate::remote::RemoteError;
use crate::retrieve::{
    build_edge_index, integrate, rerank_edges, retrieve_edges, EdgeIndex, NodeIndex, Reranker,
    RetrieveError, VectorIndex,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{role} index was built for {found}, config expects {expected}; re-run `index`")]
    Fingerprint {
        role: &'static str,
        found: String,
        expected: String,
    },
    #[error("index build: {0}")]
    Index(#[source] RetrieveError),
    #[error("stage 1 (edge retrieval): {0}")]
    Retrieval(#[source] RetrieveError),
    #[error("stage 2 (node expansion): {0}")]
    Expansion(#[source] RetrieveError),
    #[error("stage 3 (refinement): {0}")]
    Refinement(#[source] RefineError),
    #[error("reader: {0}")]
    Reader(#[source] RemoteError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn retrieve_is_remote(e: &RetrieveError) -> bool {
    matches!(
        e,
        RetrieveError::Remote(_) | RetrieveError::Embed(EmbedError::Remote(_))
    )
}

impl PipelineError {
    /// Whether the failure came from a remote model service.
    pub fn is_remote(&self) -> bool {
        match self {
            Self::Index(e) | Self::Retrieval(e) | Self::Expansion(e) => retrieve_is_remote(e),
            Self::Refinement(RefineError::Remote(_)) | Self::Reader(_) => true,
            Self::Refinement(RefineError::Retrieve(e)) => retrieve_is_remote(e),
            _ => false,
        }
    }
}

/// Which stage first put an edge into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Stage1,
    Qne,
    Agg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEdge {
    pub segment_id: String,
    pub passage_id: String,
    pub score: f64,
    pub provenance: Provenance,
    /// Removed by refinement and appended to fill the list to `k`.
    pub fallback: bool,
}

impl OutputEdge {
    pub fn scored(&self) -> ScoredEdge {
        ScoredEdge::new(&self.segment_id, &self.passage_id, self.score)
    }
}

/// Stage-by-stage edge sets of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub question: String,
    pub toggles: StageToggles,
    /// Reranked first-stage edges (the candidate graph).
    pub stage1: Vec<ScoredEdge>,
    pub seeds: Vec<SeedCandidate>,
    pub expansion: Vec<ScoredEdge>,
    pub aggregation: bool,
    pub aggregation_edges: Vec<ScoredEdge>,
    /// Every edge entering verification with its score, ranked.
    pub pre_refinement: Vec<ScoredEdge>,
    pub removed: Vec<ScoredEdge>,
    pub row_verdicts: Vec<RefinerVerdict>,
    pub verdicts: Vec<RefinerVerdict>,
    pub refiner_outage: bool,
    pub output: Vec<OutputEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub trace: QueryTrace,
    /// Untruncated linearization of each output edge, in output order.
    pub texts: Vec<String>,
}

impl QueryResult {
    pub fn output(&self) -> &[OutputEdge] {
        &self.trace.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Indexes {
    pub edges: EdgeIndex,
    pub segments: NodeIndex,
    pub passages: NodeIndex,
}

/// Builds the edge index and both node indexes under `config`.
pub fn build_indexes(
    config: &PipelineConfig,
    corpus: &Corpus,
    linkage: &Linkage,
) -> Result<Indexes, PipelineError> {
    let retry = config.retry.policy();
    let embedder = config.edge_embedder.build(&retry);
    let f_ps = config.passage_to_segment.build(&retry);
    let f_sp = config.segment_to_passage.build(&retry);
    info!(edges = linkage.graph.edge_count(), "building edge index");
    let edges = build_edge_index(
        &linkage.graph,
        corpus,
        embedder.as_ref(),
        &config.edge_embedder.fingerprint(),
    )
    .map_err(PipelineError::Index)?;
    let segments = build_node_index(
        corpus.segments().iter().map(|s| NodeRef::segment(&s.id)),
        corpus,
        f_ps.as_ref(),
        &config.passage_to_segment.fingerprint(),
    )?;
    let passages = build_node_index(
        corpus.passages().iter().map(|p| NodeRef::passage(&p.id)),
        corpus,
        f_sp.as_ref(),
        &config.segment_to_passage.fingerprint(),
    )?;
    Ok(Indexes {
        edges,
        segments,
        passages,
    })
}

fn build_node_index(
    nodes: impl Iterator<Item = NodeRef>,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    fingerprint: &str,
) -> Result<NodeIndex, PipelineError> {
    let items = nodes
        .map(|n| {
            let text = node_text(&n, corpus, embedder.max_tokens())?;
            Ok((n, text))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    VectorIndex::build(items, embedder, fingerprint).map_err(PipelineError::Index)
}

/// A loaded workspace ready to answer queries.
pub struct Engine {
    config: PipelineConfig,
    corpus: Corpus,
    row_links: RowLinks,
    indexes: Indexes,
    edge_embedder: Arc<dyn Embedder>,
    passage_to_segment: Arc<dyn Embedder>,
    segment_to_passage: Arc<dyn Embedder>,
    edge_reranker: Arc<dyn Reranker>,
    node_reranker: Arc<dyn Reranker>,
    refiner: Refiner,
}

impl Engine {
    pub fn new(
        config: PipelineConfig,
        corpus: Corpus,
        linkage: &Linkage,
        indexes: Indexes,
    ) -> Result<Self, PipelineError> {
        config
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (role, index_fp, expected) in [
            (
                "edge",
                indexes.edges.fingerprint(),
                config.edge_embedder.fingerprint(),
            ),
            (
                "segment",
                indexes.segments.fingerprint(),
                config.passage_to_segment.fingerprint(),
            ),
            (
                "passage",
                indexes.passages.fingerprint(),
                config.segment_to_passage.fingerprint(),
            ),
        ] {
            if index_fp != expected {
                return Err(PipelineError::Fingerprint {
                    role,
                    found: index_fp.to_owned(),
                    expected,
                });
            }
        }
        let retry = config.retry.policy();
        let in_flight = config.edge_embedder.max_in_flight;
        Ok(Self {
            edge_embedder: config.edge_embedder.build(&retry),
            passage_to_segment: config.passage_to_segment.build(&retry),
            segment_to_passage: config.segment_to_passage.build(&retry),
            edge_reranker: config.edge_reranker.build(&retry, in_flight),
            node_reranker: config.node_reranker.build(&retry, in_flight),
            refiner: config
                .refiner
                .build(&retry)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
            row_links: linkage.row_links(),
            corpus,
            indexes,
            config,
        })
    }

    /// Builds indexes in memory and wraps them.
    pub fn build(
        config: PipelineConfig,
        corpus: Corpus,
        linkage: &Linkage,
    ) -> Result<Self, PipelineError> {
        let indexes = build_indexes(&config, &corpus, linkage)?;
        Self::new(config, corpus, linkage, indexes)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn indexes(&self) -> &Indexes {
        &self.indexes
    }

    pub fn refiner(&self) -> &Refiner {
        &self.refiner
    }

    pub fn edge_embedder(&self) -> &dyn Embedder {
        self.edge_embedder.as_ref()
    }

    /// Runs the configured stages and returns the top `config.k` edges.
    pub fn query(&self, question: &str, hint: Option<&str>) -> Result<QueryResult, PipelineError> {
        self.query_with(question, hint, self.config.stages, self.config.k)
    }

    pub fn query_with(
        &self,
        question: &str,
        hint: Option<&str>,
        toggles: StageToggles,
        k: usize,
    ) -> Result<QueryResult, PipelineError> {
        let cfg = &self.config;
        let embedder = self.edge_embedder.as_ref();

        let retrieved = retrieve_edges(question, &self.indexes.edges, embedder, cfg.k1)
            .map_err(PipelineError::Retrieval)?;
        let reranked = rerank_edges(
            question,
            &retrieved,
            &self.corpus,
            self.edge_reranker.as_ref(),
            cfg.k2,
            embedder.max_tokens(),
        )
        .map_err(PipelineError::Retrieval)?;
        let candidate = integrate(reranked.clone()).map_err(PipelineError::Retrieval)?;
        debug!(edges = candidate.edge_count(), "candidate graph");

        let expansion = if toggles.qne {
            Expander {
                edge_embedder: embedder,
                edge_reranker: self.edge_reranker.as_ref(),
                node_reranker: self.node_reranker.as_ref(),
                passage_to_segment: self.passage_to_segment.as_ref(),
                segment_to_passage: self.segment_to_passage.as_ref(),
                segment_index: &self.indexes.segments,
                passage_index: &self.indexes.passages,
                fanout: cfg.fanout,
            }
            .beam_expand(question, &candidate, &self.corpus, cfg.b)
            .map_err(PipelineError::Expansion)?
        } else {
            crate::expand::Expansion {
                graph: candidate.clone(),
                seeds: Vec::new(),
                candidates: Vec::new(),
                added: Vec::new(),
            }
        };
        let qne_keys: BTreeSet<_> = expansion.added.iter().map(ScoredEdge::key).collect();

        let mut trace = QueryTrace {
            question: question.to_owned(),
            toggles,
            stage1: reranked,
            seeds: expansion.seeds.clone(),
            expansion: expansion.added.clone(),
            aggregation: false,
            aggregation_edges: Vec::new(),
            pre_refinement: Vec::new(),
            removed: Vec::new(),
            row_verdicts: Vec::new(),
            verdicts: Vec::new(),
            refiner_outage: false,
            output: Vec::new(),
        };

        let provenance = |e: &ScoredEdge| {
            if is_aggregation_edge(e) {
                Provenance::Agg
            } else if qne_keys.contains(&e.key()) {
                Provenance::Qne
            } else {
                Provenance::Stage1
            }
        };

        let (ranked, texts) = if toggles.slr {
            let refinement = self
                .refiner
                .refine_graph(&RefineInput {
                    query: question,
                    hint,
                    graph: &expansion.graph,
                    corpus: &self.corpus,
                    row_links: &self.row_links,
                    edge_embedder: embedder,
                    edge_reranker: self.edge_reranker.as_ref(),
                })
                .map_err(PipelineError::Refinement)?;
            trace.aggregation = refinement.aggregation;
            trace.aggregation_edges = refinement.added.clone();
            trace.pre_refinement = refinement.augmented.ranked_edges();
            trace.removed = refinement.removed.clone();
            trace.row_verdicts = refinement.row_verdicts.clone();
            trace.verdicts = refinement.verdicts.clone();
            trace.refiner_outage = refinement.outage;
            let ranked = rank_output(&refinement.refined, &refinement.removed, k);
            let kept: BTreeSet<_> = refinement.refined.edge_keys().cloned().collect();
            let ranked: Vec<(ScoredEdge, bool)> = ranked
                .into_iter()
                .map(|e| {
                    let fallback = !kept.contains(&e.key());
                    (e, fallback)
                })
                .collect();
            let texts = self.texts(ranked.iter().map(|(e, _)| e), &refinement.overlay)?;
            (ranked, texts)
        } else {
            let mut ranked = expansion.graph.ranked_edges();
            ranked.truncate(k);
            trace.pre_refinement = expansion.graph.ranked_edges();
            let texts = self.texts(ranked.iter(), &self.corpus)?;
            (ranked.into_iter().map(|e| (e, false)).collect(), texts)
        };

        trace.output = ranked
            .into_iter()
            .map(|(e, fallback)| OutputEdge {
                provenance: provenance(&e),
                segment_id: e.segment,
                passage_id: e.passage,
                score: e.score,
                fallback,
            })
            .collect();
        Ok(QueryResult { trace, texts })
    }

    fn texts<'e, R: NodeResolver + ?Sized>(
        &self,
        edges: impl Iterator<Item = &'e ScoredEdge>,
        resolver: &R,
    ) -> Result<Vec<String>, PipelineError> {
        edges
            .map(|e| linearize_edge(&e.key(), resolver, usize::MAX).map_err(PipelineError::from))
            .collect()
    }

    /// Reader answer over the linearized output edges.
    pub fn read(
        &self,
        question: &str,
        hint: Option<&str>,
        texts: &[String],
    ) -> Result<String, PipelineError> {
        self.refiner
            .read(question, hint, texts)
            .map_err(PipelineError::Reader)
    }
}
