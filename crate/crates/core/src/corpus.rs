//! Tables, passages, table segments and the segment-to-table mapping.
//!
//! Ingestion reads two line-delimited JSON files. Segmentation splits each
//! table into contiguous row slices that repeat the table title and header,
//! and records which table every segment came from so the full table can be
//! restored later.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::text::normalize_cell;

pub const DEFAULT_MAX_ROWS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed record: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: table {table_id} row {row} has {found} cells, header has {expected}")]
    RaggedRow {
        file: String,
        line: usize,
        table_id: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("empty corpus side: {0}")]
    EmptySide(&'static str),
    #[error("unknown table segment {0:?}")]
    UnknownSegment(String),
    #[error("unknown passage {0:?}")]
    UnknownPassage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub title: String,
    pub header: Vec<String>,
    /// Raw cell text, kept as ingested for display.
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSegment {
    pub id: String,
    pub table_id: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Index of the first row of this slice in the parent table.
    pub row_offset: usize,
}

impl TableSegment {
    /// 0-based parent row index of the segment's `i`-th row.
    pub fn parent_row(&self, i: usize) -> usize {
        self.row_offset + i
    }
}

/// Flattens a segment as `title | col1 | .. | colN | cell11 | ..`.
///
/// Cells are whitespace-normalized; empty cells stay as empty tokens between
/// separators.
pub fn linearize_segment(segment: &TableSegment) -> String {
    let mut parts = Vec::with_capacity(1 + segment.header.len() * (1 + segment.rows.len()));
    parts.push(normalize_cell(&segment.title));
    parts.extend(segment.header.iter().map(|h| normalize_cell(h)));
    for row in &segment.rows {
        parts.extend(row.iter().map(|c| normalize_cell(c)));
    }
    parts.join(" | ")
}

/// Node text of a passage: `title [SEP] body`.
pub fn passage_text(passage: &Passage) -> String {
    format!("{} [SEP] {}", passage.title, passage.body)
}

/// Id lookups for graph endpoints. Implemented by [`Corpus`] and by
/// [`CorpusOverlay`], which adds per-query segments on top of a corpus.
pub trait NodeResolver {
    fn segment(&self, id: &str) -> Option<&TableSegment>;
    fn passage(&self, id: &str) -> Option<&Passage>;
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CorpusData {
    passages: Vec<Passage>,
    tables: Vec<Table>,
    segments: Vec<TableSegment>,
    segment_to_table: BTreeMap<String, String>,
}

/// Corpus of passages, tables and (after [`Corpus::segment_tables`]) segments.
///
/// Immutable once built; lookups go through id maps built at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "CorpusData", into = "CorpusData")]
pub struct Corpus {
    data: CorpusData,
    passage_ix: HashMap<String, usize>,
    table_ix: HashMap<String, usize>,
    segment_ix: HashMap<String, usize>,
}

impl From<CorpusData> for Corpus {
    fn from(data: CorpusData) -> Self {
        let index = |ids: Vec<&String>| {
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i))
                .collect::<HashMap<_, _>>()
        };
        let passage_ix = index(data.passages.iter().map(|p| &p.id).collect());
        let table_ix = index(data.tables.iter().map(|t| &t.id).collect());
        let segment_ix = index(data.segments.iter().map(|s| &s.id).collect());
        Self {
            data,
            passage_ix,
            table_ix,
            segment_ix,
        }
    }
}

impl From<Corpus> for CorpusData {
    fn from(corpus: Corpus) -> Self {
        corpus.data
    }
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.data.passages == other.data.passages
            && self.data.tables == other.data.tables
            && self.data.segments == other.data.segments
            && self.data.segment_to_table == other.data.segment_to_table
    }
}

#[derive(Deserialize)]
struct TableRecord {
    id: String,
    title: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct PassageRecord {
    id: String,
    title: String,
    body: String,
}

fn read_records<T, R: BufRead>(reader: R, file: &str) -> Result<Vec<(usize, T)>, CorpusError>
where
    T: for<'de> Deserialize<'de>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            file: file.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            file: file.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })
}

impl Corpus {
    /// Loads tables and passages from line-delimited JSON files.
    pub fn ingest(table_file: &Path, passage_file: &Path) -> Result<Self, CorpusError> {
        Self::ingest_readers(
            open(table_file)?,
            &table_file.display().to_string(),
            open(passage_file)?,
            &passage_file.display().to_string(),
        )
    }

    pub fn ingest_readers<T: BufRead, P: BufRead>(
        tables: T,
        table_name: &str,
        passages: P,
        passage_name: &str,
    ) -> Result<Self, CorpusError> {
        let table_records: Vec<(usize, TableRecord)> = read_records(tables, table_name)?;
        let passage_records: Vec<(usize, PassageRecord)> = read_records(passages, passage_name)?;

        let mut tables = Vec::with_capacity(table_records.len());
        for (line, rec) in table_records {
            if rec.id.is_empty() {
                return Err(CorpusError::Parse {
                    file: table_name.to_owned(),
                    line,
                    message: "empty table id".into(),
                });
            }
            for (r, row) in rec.rows.iter().enumerate() {
                if row.len() != rec.header.len() {
                    return Err(CorpusError::RaggedRow {
                        file: table_name.to_owned(),
                        line,
                        table_id: rec.id.clone(),
                        row: r,
                        expected: rec.header.len(),
                        found: row.len(),
                    });
                }
            }
            tables.push(Table {
                id: rec.id,
                title: rec.title,
                header: rec.header,
                rows: rec.rows,
            });
        }

        let mut passages = Vec::with_capacity(passage_records.len());
        for (line, rec) in passage_records {
            if rec.id.is_empty() || rec.title.trim().is_empty() {
                return Err(CorpusError::Parse {
                    file: passage_name.to_owned(),
                    line,
                    message: "passage id and title must be non-empty".into(),
                });
            }
            passages.push(Passage {
                id: rec.id,
                title: rec.title,
                body: rec.body,
            });
        }
        Self::from_parts(tables, passages)
    }

    /// Builds an unsegmented corpus, checking id uniqueness and that both
    /// sides are non-empty.
    pub fn from_parts(tables: Vec<Table>, passages: Vec<Passage>) -> Result<Self, CorpusError> {
        if tables.is_empty() {
            return Err(CorpusError::EmptySide("tables"));
        }
        if passages.is_empty() {
            return Err(CorpusError::EmptySide("passages"));
        }
        let corpus = Corpus::from(CorpusData {
            passages,
            tables,
            segments: Vec::new(),
            segment_to_table: BTreeMap::new(),
        });
        if corpus.passage_ix.len() != corpus.data.passages.len() {
            return Err(CorpusError::DuplicateId {
                kind: "passage",
                id: first_duplicate(corpus.data.passages.iter().map(|p| p.id.as_str())),
            });
        }
        if corpus.table_ix.len() != corpus.data.tables.len() {
            return Err(CorpusError::DuplicateId {
                kind: "table",
                id: first_duplicate(corpus.data.tables.iter().map(|t| t.id.as_str())),
            });
        }
        Ok(corpus)
    }

    /// Partitions every table into `ceil(rows / max_rows)` contiguous
    /// segments with ids `<table id>#<ordinal>`, replacing any previous
    /// segmentation.
    pub fn segment_tables(&self, max_rows: usize) -> Corpus {
        let max_rows = max_rows.max(1);
        let mut segments = Vec::new();
        let mut segment_to_table = BTreeMap::new();
        for table in &self.data.tables {
            if table.rows.is_empty() {
                warn!(table = %table.id, "table has no rows; no segments produced");
                continue;
            }
            for (ordinal, chunk) in table.rows.chunks(max_rows).enumerate() {
                let id = format!("{}#{}", table.id, ordinal);
                segment_to_table.insert(id.clone(), table.id.clone());
                segments.push(TableSegment {
                    id,
                    table_id: table.id.clone(),
                    title: table.title.clone(),
                    header: table.header.clone(),
                    rows: chunk.to_vec(),
                    row_offset: ordinal * max_rows,
                });
            }
        }
        Corpus::from(CorpusData {
            passages: self.data.passages.clone(),
            tables: self.data.tables.clone(),
            segments,
            segment_to_table,
        })
    }

    /// The full parent table of a segment.
    pub fn restore_table(&self, segment_id: &str) -> Result<&Table, CorpusError> {
        let table_id = self
            .data
            .segment_to_table
            .get(segment_id)
            .ok_or_else(|| CorpusError::UnknownSegment(segment_id.to_owned()))?;
        Ok(&self.data.tables[self.table_ix[table_id]])
    }

    pub fn passages(&self) -> &[Passage] {
        &self.data.passages
    }

    pub fn tables(&self) -> &[Table] {
        &self.data.tables
    }

    pub fn segments(&self) -> &[TableSegment] {
        &self.data.segments
    }

    pub fn segment_to_table(&self) -> &BTreeMap<String, String> {
        &self.data.segment_to_table
    }

    pub fn table(&self, id: &str) -> Option<&Table> {
        self.table_ix.get(id).map(|&i| &self.data.tables[i])
    }

    /// The segment holding 0-based row `row` of table `table_id`.
    pub fn segment_for_row(&self, table_id: &str, row: usize) -> Option<&TableSegment> {
        // Segments of one table are contiguous and ordered by ordinal.
        self.data
            .segments
            .iter()
            .filter(|s| s.table_id == table_id)
            .find(|s| row >= s.row_offset && row < s.row_offset + s.rows.len())
    }
}

impl NodeResolver for Corpus {
    fn segment(&self, id: &str) -> Option<&TableSegment> {
        self.segment_ix.get(id).map(|&i| &self.data.segments[i])
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.passage_ix.get(id).map(|&i| &self.data.passages[i])
    }
}

/// A corpus plus segments created while answering one query (aggregation
/// result rows). The base corpus is never mutated.
#[derive(Debug, Clone)]
pub struct CorpusOverlay<'a> {
    base: &'a Corpus,
    extra: BTreeMap<String, TableSegment>,
}

impl<'a> CorpusOverlay<'a> {
    pub fn new(base: &'a Corpus) -> Self {
        Self {
            base,
            extra: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &'a Corpus {
        self.base
    }

    pub fn insert_segment(&mut self, segment: TableSegment) {
        self.extra.insert(segment.id.clone(), segment);
    }

    pub fn extra_segments(&self) -> impl Iterator<Item = &TableSegment> {
        self.extra.values()
    }
}

impl NodeResolver for CorpusOverlay<'_> {
    fn segment(&self, id: &str) -> Option<&TableSegment> {
        self.extra.get(id).or_else(|| self.base.segment(id))
    }

    fn passage(&self, id: &str) -> Option<&Passage> {
        self.base.passage(id)
    }
}

fn first_duplicate<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return id.to_owned();
        }
    }
    String::new()
}
