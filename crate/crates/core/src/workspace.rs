//! On-disk workspace holding the staged artifacts: corpus, data graph,
//! link provenance, and the three vector indexes. Every file is written to a
//! temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::graph::{BipartiteGraph, GraphError, NodeRef};
use crate::linker::{LinkError, Linkage};
use crate::pipeline::Indexes;
use crate::retrieve::{RetrieveError, VectorIndex};

pub const CORPUS_FILE: &str = "corpus.json";
pub const GRAPH_FILE: &str = "graph.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const EDGE_INDEX_FILE: &str = "edge_index.bin";
pub const SEGMENT_INDEX_FILE: &str = "node_index_segments.bin";
pub const PASSAGE_INDEX_FILE: &str = "node_index_passages.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("workspace has no {artifact}; run `{command}` first")]
    Missing {
        artifact: &'static str,
        command: &'static str,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

/// When each stage last wrote its artifacts, and with which settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub built_at: u64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| WorkspaceError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    fn io(&self, file: &str) -> impl Fn(std::io::Error) -> WorkspaceError + '_ {
        let path = self.path(file);
        move |source| WorkspaceError::Io {
            path: path.clone(),
            source,
        }
    }

    fn write_atomic(
        &self,
        file: &str,
        body: impl FnOnce(&mut BufWriter<&mut File>) -> Result<(), WorkspaceError>,
    ) -> Result<(), WorkspaceError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(self.io(file))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            body(&mut w)?;
            w.flush().map_err(self.io(file))?;
        }
        tmp.as_file().sync_all().map_err(self.io(file))?;
        tmp.persist(self.path(file))
            .map_err(|e| WorkspaceError::Io {
                path: self.path(file),
                source: e.error,
            })?;
        Ok(())
    }

    fn open_required(
        &self,
        file: &str,
        artifact: &'static str,
        command: &'static str,
    ) -> Result<BufReader<File>, WorkspaceError> {
        let path = self.path(file);
        if !path.exists() {
            return Err(WorkspaceError::Missing { artifact, command });
        }
        Ok(BufReader::new(File::open(&path).map_err(self.io(file))?))
    }

    pub fn manifest(&self) -> Result<Manifest, WorkspaceError> {
        let path = self.path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(self.io(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    fn record(&self, stage: &str, detail: String) -> Result<(), WorkspaceError> {
        let mut manifest = self.manifest()?;
        let built_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        manifest
            .stages
            .insert(stage.to_owned(), StageRecord { built_at, detail });
        self.write_atomic(MANIFEST_FILE, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)
                .map_err(std::io::Error::from)
                .map_err(self.io(MANIFEST_FILE))?;
            w.write_all(b"\n").map_err(self.io(MANIFEST_FILE))
        })
    }

    pub fn save_corpus(&self, corpus: &Corpus) -> Result<(), WorkspaceError> {
        self.write_atomic(CORPUS_FILE, |w| {
            serde_json::to_writer(&mut *w, corpus)
                .map_err(std::io::Error::from)
                .map_err(self.io(CORPUS_FILE))
        })?;
        self.record(
            "ingest",
            format!(
                "{} tables, {} segments, {} passages",
                corpus.tables().len(),
                corpus.segments().len(),
                corpus.passages().len()
            ),
        )
    }

    pub fn load_corpus(&self) -> Result<Corpus, WorkspaceError> {
        let reader = self.open_required(CORPUS_FILE, "corpus", "ingest")?;
        serde_json::from_reader(reader).map_err(|e| WorkspaceError::Corrupt {
            path: self.path(CORPUS_FILE),
            message: e.to_string(),
        })
    }

    pub fn save_linkage(&self, linkage: &Linkage) -> Result<(), WorkspaceError> {
        self.write_atomic(GRAPH_FILE, |w| Ok(linkage.graph.write_edges(&mut *w)?))?;
        self.write_atomic(PROVENANCE_FILE, |w| Ok(linkage.write_provenance(&mut *w)?))?;
        self.record("link", format!("{} edges", linkage.graph.edge_count()))
    }

    /// Data graph over every node of `corpus` plus the stored edges.
    pub fn load_linkage(&self, corpus: &Corpus) -> Result<Linkage, WorkspaceError> {
        let edges =
            BipartiteGraph::read_edges(self.open_required(GRAPH_FILE, "data graph", "link")?)?;
        let provenance = Linkage::read_provenance(self.open_required(
            PROVENANCE_FILE,
            "link provenance",
            "link",
        )?)?;
        let nodes = corpus
            .segments()
            .iter()
            .map(|s| NodeRef::segment(&s.id))
            .chain(corpus.passages().iter().map(|p| NodeRef::passage(&p.id)));
        let graph = BipartiteGraph::with_nodes(nodes).add_edges(edges)?;
        Ok(Linkage { graph, provenance })
    }

    pub fn save_indexes(&self, indexes: &Indexes) -> Result<(), WorkspaceError> {
        self.write_atomic(EDGE_INDEX_FILE, |w| Ok(indexes.edges.write_to(&mut *w)?))?;
        self.write_atomic(SEGMENT_INDEX_FILE, |w| {
            Ok(indexes.segments.write_to(&mut *w)?)
        })?;
        self.write_atomic(PASSAGE_INDEX_FILE, |w| {
            Ok(indexes.passages.write_to(&mut *w)?)
        })?;
        self.record(
            "index",
            format!(
                "edges {} ({}), segments {}, passages {}",
                indexes.edges.len(),
                indexes.edges.fingerprint(),
                indexes.segments.len(),
                indexes.passages.len()
            ),
        )
    }

    pub fn load_indexes(&self) -> Result<Indexes, WorkspaceError> {
        Ok(Indexes {
            edges: VectorIndex::read_from(self.open_required(
                EDGE_INDEX_FILE,
                "edge index",
                "index",
            )?)?,
            segments: VectorIndex::read_from(self.open_required(
                SEGMENT_INDEX_FILE,
                "segment index",
                "index",
            )?)?,
            passages: VectorIndex::read_from(self.open_required(
                PASSAGE_INDEX_FILE,
                "passage index",
                "index",
            )?)?,
        })
    }

    /// Writes `bytes` to `file` atomically; for reports and traces.
    pub fn write_file(&self, file: &str, bytes: &[u8]) -> Result<(), WorkspaceError> {
        write_atomic_path(&self.path(file), bytes)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic_path(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let io = |source| WorkspaceError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
