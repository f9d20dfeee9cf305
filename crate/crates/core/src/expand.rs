//! Query-relevant node expansion.
//!
//! Grows the candidate subgraph with edges that early fusion never produced,
//! as a two-step beam search over
//!
//! ```text
//! p(u, v | q) = p(v | u, q) * p(u | q),   u a candidate node
//! ```
//!
//! 1. Seed selection: score every candidate node with the node reranker,
//!    softmax over all candidate nodes, keep the top `b` as seeds.
//! 2. Seed expansion: for each seed `u`, retrieve opposite-kind nodes with
//!    the expanded query `[q; text(u)]`, softmax over the retrieved fanout
//!    set, multiply by `p(u | q)`, and keep the `b` best pairs overall.
//!
//! New edges are scored by the edge reranker and written into the score map.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::NodeResolver;
use crate::embed::{maxsim, node_text, Embedder, MultiVector, SEP};
use crate::graph::{BipartiteGraph, EdgeKey, NodeKind, NodeRef, ScoredEdge};
use crate::retrieve::{score_new_edges, NodeIndex, RerankCandidate, Reranker, RetrieveError};
use crate::text::truncate_to_tokens;

pub const DEFAULT_BEAM: usize = 10;
pub const DEFAULT_FANOUT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCandidate {
    pub node: NodeRef,
    pub reranker_score: f64,
    /// `p(u | q)`, softmax over every node of the candidate graph.
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCandidate {
    pub seed: NodeRef,
    pub target: NodeRef,
    pub score: f64,
    /// `p(v | u, q)` over the seed's retrieved fanout set.
    pub cond_prob: f64,
    /// `p(v | u, q) * p(u | q)`.
    pub joint: f64,
}

impl ExpansionCandidate {
    pub fn edge_key(&self) -> EdgeKey {
        match self.seed.kind {
            NodeKind::TableSegment => EdgeKey::new(&self.seed.id, &self.target.id),
            NodeKind::Passage => EdgeKey::new(&self.target.id, &self.seed.id),
        }
    }
}

/// Numerically stable softmax at temperature 1.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Models and indexes used by the expansion stage.
pub struct Expander<'a> {
    /// Edge retriever; its MaxSim is the prior for passthrough rerankers.
    pub edge_embedder: &'a dyn Embedder,
    pub edge_reranker: &'a dyn Reranker,
    pub node_reranker: &'a dyn Reranker,
    /// Expands passage seeds to segments.
    pub passage_to_segment: &'a dyn Embedder,
    /// Expands segment seeds to passages.
    pub segment_to_passage: &'a dyn Embedder,
    /// All corpus segments, embedded with `passage_to_segment`.
    pub segment_index: &'a NodeIndex,
    /// All corpus passages, embedded with `segment_to_passage`.
    pub passage_index: &'a NodeIndex,
    pub fanout: usize,
}

/// Everything the beam produced, kept for traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub graph: BipartiteGraph,
    pub seeds: Vec<SeedCandidate>,
    pub candidates: Vec<ExpansionCandidate>,
    pub added: Vec<ScoredEdge>,
}

impl Expander<'_> {
    /// Top-`b` nodes of the candidate graph by node-reranker score, with
    /// probabilities normalized over all of its nodes.
    pub fn select_seeds<R: NodeResolver + ?Sized>(
        &self,
        query: &str,
        query_vec: &MultiVector,
        candidate: &BipartiteGraph,
        resolver: &R,
        b: usize,
    ) -> Result<Vec<SeedCandidate>, RetrieveError> {
        if b == 0 || candidate.is_empty() {
            return Ok(Vec::new());
        }
        let nodes: Vec<&NodeRef> = candidate.nodes().iter().collect();
        let max_tokens = self.edge_embedder.max_tokens();
        let texts = nodes
            .iter()
            .map(|n| node_text(n, resolver, max_tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let priors: Vec<f64> = if self.node_reranker.needs_text() {
            vec![0.0; nodes.len()]
        } else {
            let vecs = self.edge_embedder.embed_batch(&texts)?;
            vecs.iter()
                .map(|v| maxsim(query_vec, v))
                .collect::<Result<_, _>>()?
        };
        let candidates: Vec<RerankCandidate> = texts
            .into_iter()
            .zip(priors)
            .map(|(text, prior)| RerankCandidate { text, prior })
            .collect();
        let scores = self.node_reranker.score(query, &candidates)?;
        if scores.len() != nodes.len() {
            return Err(RetrieveError::RerankShape {
                expected: nodes.len(),
                got: scores.len(),
            });
        }
        let probs = softmax(&scores);
        let mut seeds: Vec<SeedCandidate> = nodes
            .into_iter()
            .zip(scores.into_iter().zip(probs))
            .map(|(node, (score, prob))| SeedCandidate {
                node: node.clone(),
                reranker_score: score,
                prob,
            })
            .collect();
        seeds.sort_by(|a, b| {
            b.reranker_score
                .total_cmp(&a.reranker_score)
                .then_with(|| a.node.cmp(&b.node))
        });
        seeds.truncate(b);
        Ok(seeds)
    }

    /// Retrieves the seed's top-`fanout` opposite-kind nodes outside the
    /// candidate graph using the expanded query `q [SEP] text(u)`.
    pub fn expand_seed<R: NodeResolver + ?Sized>(
        &self,
        query: &str,
        seed: &SeedCandidate,
        candidate: &BipartiteGraph,
        resolver: &R,
    ) -> Result<Vec<ExpansionCandidate>, RetrieveError> {
        let (embedder, index) = match seed.node.kind {
            NodeKind::Passage => (self.passage_to_segment, self.segment_index),
            NodeKind::TableSegment => (self.segment_to_passage, self.passage_index),
        };
        let seed_text = node_text(&seed.node, resolver, embedder.max_tokens())?;
        let expanded = format!("{query} {SEP} {seed_text}");
        let qv = embedder.embed(truncate_to_tokens(&expanded, embedder.max_tokens()))?;
        let hits = index.search(&qv, self.fanout, |target| !candidate.contains_node(target))?;
        let scores: Vec<f64> = hits.iter().map(|(_, s)| *s).collect();
        let cond = softmax(&scores);
        Ok(hits
            .into_iter()
            .zip(cond)
            .map(|((target, score), cond_prob)| ExpansionCandidate {
                seed: seed.node.clone(),
                target,
                score,
                cond_prob,
                joint: cond_prob * seed.prob,
            })
            .collect())
    }

    /// Adds the `b` best new edges by joint probability to the candidate
    /// graph. `b = 0` returns the candidate graph unchanged.
    pub fn beam_expand<R: NodeResolver + Sync + ?Sized>(
        &self,
        query: &str,
        candidate: &BipartiteGraph,
        resolver: &R,
        b: usize,
    ) -> Result<Expansion, RetrieveError> {
        let unchanged = || Expansion {
            graph: candidate.clone(),
            seeds: Vec::new(),
            candidates: Vec::new(),
            added: Vec::new(),
        };
        if b == 0 || candidate.is_empty() {
            return Ok(unchanged());
        }
        let query_vec = self.edge_embedder.embed(query)?;
        let seeds = self.select_seeds(query, &query_vec, candidate, resolver, b)?;
        let per_seed: Vec<Vec<ExpansionCandidate>> = seeds
            .par_iter()
            .map(|s| self.expand_seed(query, s, candidate, resolver))
            .collect::<Result<_, _>>()?;
        let mut candidates: Vec<ExpansionCandidate> = per_seed.into_iter().flatten().collect();
        candidates.sort_by(|a, b| {
            b.joint
                .total_cmp(&a.joint)
                .then_with(|| a.seed.cmp(&b.seed))
                .then_with(|| a.target.cmp(&b.target))
        });

        let mut chosen: Vec<EdgeKey> = Vec::with_capacity(b);
        let mut seen = BTreeSet::new();
        for c in &candidates {
            if chosen.len() == b {
                break;
            }
            let key = c.edge_key();
            if candidate.contains_edge(&key) || !seen.insert(key.clone()) {
                continue;
            }
            chosen.push(key);
        }
        let added = score_new_edges(
            query,
            &query_vec,
            &chosen,
            resolver,
            self.edge_embedder,
            self.edge_reranker,
        )?;
        let graph = candidate.add_edges(added.iter().cloned())?;
        Ok(Expansion {
            graph,
            seeds,
            candidates,
            added,
        })
    }
}
