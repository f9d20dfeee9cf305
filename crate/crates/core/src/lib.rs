//! Table-text retrieval over a bipartite graph of table segments and
//! passages: edge retrieval, query-relevant node expansion, and star-based
//! refinement, with an evaluation harness.

pub mod config;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod expand;
pub mod graph;
pub mod linker;
pub mod pipeline;
pub mod refine;
pub mod remote;
pub mod retrieve;
pub mod synthetic;
pub mod text;
pub mod workspace;

pub use config::{PipelineConfig, StageToggles};
pub use corpus::{Corpus, Passage, Table, TableSegment};
pub use eval::{run_eval, EvalOptions, EvalReport, QAPair};
pub use graph::{BipartiteGraph, EdgeKey, NodeRef, ScoredEdge};
pub use linker::{link, Linkage};
pub use pipeline::{build_indexes, Engine, PipelineError, QueryResult, QueryTrace};
pub use workspace::Workspace;
