//! Edge-scored bipartite graph between table segments and passages.
//!
//! Every retrieval stage produces or updates one of these: the early-fused
//! data graph, the candidate subgraph, the expanded graph, and the refined
//! graph are all [`BipartiteGraph`] values. Graphs are immutable snapshots;
//! updates return a new graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge endpoints {a:?} and {b:?} are both {kind:?} nodes")]
    SameKind {
        kind: NodeKind,
        a: String,
        b: String,
    },
    #[error("edge ({segment}, {passage}) has non-finite score {score}")]
    NonFiniteScore {
        segment: String,
        passage: String,
        score: f64,
    },
    #[error("edge dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    TableSegment,
    Passage,
}

impl NodeKind {
    pub fn opposite(self) -> Self {
        match self {
            NodeKind::TableSegment => NodeKind::Passage,
            NodeKind::Passage => NodeKind::TableSegment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub id: String,
}

impl NodeRef {
    pub fn segment(id: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::TableSegment,
            id: id.into(),
        }
    }

    pub fn passage(id: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::Passage,
            id: id.into(),
        }
    }
}

/// Identity of an edge: one segment id and one passage id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub segment: String,
    pub passage: String,
}

impl EdgeKey {
    pub fn new(segment: impl Into<String>, passage: impl Into<String>) -> Self {
        Self {
            segment: segment.into(),
            passage: passage.into(),
        }
    }
}

impl std::fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.segment, self.passage)
    }
}

/// A segment-passage edge with its query score.
///
/// The endpoints are stored by role, so a same-kind edge cannot be
/// represented; [`ScoredEdge::between`] rejects one at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    #[serde(rename = "segment_id")]
    pub segment: String,
    #[serde(rename = "passage_id")]
    pub passage: String,
    pub score: f64,
}

impl ScoredEdge {
    pub fn new(segment: impl Into<String>, passage: impl Into<String>, score: f64) -> Self {
        Self {
            segment: segment.into(),
            passage: passage.into(),
            score,
        }
    }

    /// Builds an edge from two typed endpoints in either order.
    pub fn between(a: &NodeRef, b: &NodeRef, score: f64) -> Result<Self, GraphError> {
        match (a.kind, b.kind) {
            (NodeKind::TableSegment, NodeKind::Passage) => Ok(Self::new(&a.id, &b.id, score)),
            (NodeKind::Passage, NodeKind::TableSegment) => Ok(Self::new(&b.id, &a.id, score)),
            (kind, _) => Err(GraphError::SameKind {
                kind,
                a: a.id.clone(),
                b: b.id.clone(),
            }),
        }
    }

    pub fn key(&self) -> EdgeKey {
        EdgeKey::new(&self.segment, &self.passage)
    }

    pub fn segment_ref(&self) -> NodeRef {
        NodeRef::segment(&self.segment)
    }

    pub fn passage_ref(&self) -> NodeRef {
        NodeRef::passage(&self.passage)
    }
}

/// Ranking order used everywhere: score descending, then edge key ascending.
pub fn rank_order(a: &ScoredEdge, b: &ScoredEdge) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.segment.cmp(&b.segment))
        .then_with(|| a.passage.cmp(&b.passage))
}

/// A table-segment center and its passage leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Star {
    pub center: NodeRef,
    /// (passage, score), score descending then id ascending.
    pub leaves: Vec<(NodeRef, f64)>,
}

impl Star {
    pub fn edges(&self) -> impl Iterator<Item = ScoredEdge> + '_ {
        self.leaves
            .iter()
            .map(|(p, s)| ScoredEdge::new(&self.center.id, &p.id, *s))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BipartiteGraph {
    nodes: BTreeSet<NodeRef>,
    edges: BTreeMap<EdgeKey, f64>,
}

impl BipartiteGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph holding `nodes` and no edges.
    pub fn with_nodes(nodes: impl IntoIterator<Item = NodeRef>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: BTreeMap::new(),
        }
    }

    /// Collapses duplicate (segment, passage) pairs keeping the maximum score.
    /// The node set is the union of all endpoints.
    pub fn merge_edges(edges: impl IntoIterator<Item = ScoredEdge>) -> Result<Self, GraphError> {
        Self::new().add_edges(edges)
    }

    /// Returns a new graph with `edges` added. An edge already present keeps
    /// the larger of its two scores.
    pub fn add_edges(
        &self,
        edges: impl IntoIterator<Item = ScoredEdge>,
    ) -> Result<Self, GraphError> {
        let mut next = self.clone();
        for edge in edges {
            next.insert(edge)?;
        }
        Ok(next)
    }

    fn insert(&mut self, edge: ScoredEdge) -> Result<(), GraphError> {
        if !edge.score.is_finite() {
            return Err(GraphError::NonFiniteScore {
                segment: edge.segment,
                passage: edge.passage,
                score: edge.score,
            });
        }
        self.nodes.insert(edge.segment_ref());
        self.nodes.insert(edge.passage_ref());
        self.edges
            .entry(edge.key())
            .and_modify(|s| *s = s.max(edge.score))
            .or_insert(edge.score);
        Ok(())
    }

    /// Returns a new graph without `keys`. Endpoints left with no edges are
    /// dropped from the node set. Unknown keys are ignored with a warning.
    pub fn remove_edges<'a>(&self, keys: impl IntoIterator<Item = &'a EdgeKey>) -> Self {
        let mut next = self.clone();
        let mut touched = BTreeSet::new();
        for key in keys {
            if next.edges.remove(key).is_none() {
                warn!(edge = %key, "remove_edges: unknown edge ignored");
                continue;
            }
            touched.insert(NodeRef::segment(&key.segment));
            touched.insert(NodeRef::passage(&key.passage));
        }
        for node in touched {
            if next.degree(&node) == 0 {
                next.nodes.remove(&node);
            }
        }
        next
    }

    pub fn degree(&self, node: &NodeRef) -> usize {
        match node.kind {
            NodeKind::TableSegment => self.segment_neighbors(&node.id).count(),
            NodeKind::Passage => self.edges.keys().filter(|k| k.passage == node.id).count(),
        }
    }

    /// Edges incident to a segment, in passage-id order.
    pub fn segment_neighbors<'a>(
        &'a self,
        segment: &'a str,
    ) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        let start = EdgeKey::new(segment, "");
        self.edges
            .range(start..)
            .take_while(move |(k, _)| k.segment == segment)
            .map(|(k, s)| (k.passage.as_str(), *s))
    }

    pub fn nodes(&self) -> &BTreeSet<NodeRef> {
        &self.nodes
    }

    pub fn contains_node(&self, node: &NodeRef) -> bool {
        self.nodes.contains(node)
    }

    pub fn contains_edge(&self, key: &EdgeKey) -> bool {
        self.edges.contains_key(key)
    }

    /// The score map.
    pub fn score(&self, key: &EdgeKey) -> Option<f64> {
        self.edges.get(key).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges in key order.
    pub fn edges(&self) -> impl Iterator<Item = ScoredEdge> + '_ {
        self.edges
            .iter()
            .map(|(k, s)| ScoredEdge::new(&k.segment, &k.passage, *s))
    }

    pub fn edge_keys(&self) -> impl Iterator<Item = &EdgeKey> {
        self.edges.keys()
    }

    /// Edges in ranking order (score desc, key asc).
    pub fn ranked_edges(&self) -> Vec<ScoredEdge> {
        let mut all: Vec<_> = self.edges().collect();
        all.sort_by(rank_order);
        all
    }

    /// One star per table-segment node, ordered by center id. Passages with
    /// several segment neighbors appear as a leaf of each; segment nodes
    /// without edges give stars with no leaves.
    pub fn star_decompose(&self) -> Vec<Star> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::TableSegment)
            .map(|center| {
                let mut leaves: Vec<(NodeRef, f64)> = self
                    .segment_neighbors(&center.id)
                    .map(|(p, s)| (NodeRef::passage(p), s))
                    .collect();
                leaves.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
                Star {
                    center: center.clone(),
                    leaves,
                }
            })
            .collect()
    }

    /// Writes one `{segment_id, passage_id, score}` JSON record per line.
    pub fn write_edges<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        for edge in self.edges() {
            serde_json::to_writer(&mut out, &edge).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads an edge dump written by [`BipartiteGraph::write_edges`].
    pub fn read_edges<R: BufRead>(input: R) -> Result<Vec<ScoredEdge>, GraphError> {
        let mut edges = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let edge: ScoredEdge = serde_json::from_str(&line).map_err(|e| GraphError::Dump {
                line: i + 1,
                message: e.to_string(),
            })?;
            edges.push(edge);
        }
        Ok(edges)
    }
}
