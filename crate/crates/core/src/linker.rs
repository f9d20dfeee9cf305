//! Early fusion: entity mentions in table cells linked to passages by title.
//!
//! The default lexical linker treats every non-numeric cell as a mention and
//! links it to each passage whose normalized title equals the normalized
//! surface. The resulting data graph holds every corpus node, with edges only
//! where a link was found.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, TableSegment};
use crate::graph::{BipartiteGraph, GraphError, NodeRef, ScoredEdge};
use crate::text::normalize_cell;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("linker strategy `remote` has no configured service; use `lexical`")]
    RemoteUnsupported,
    #[error("provenance line {line}: {message}")]
    Provenance { line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStrategy {
    #[default]
    Lexical,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkerConfig {
    pub strategy: LinkStrategy,
    pub min_surface_len: usize,
    pub case_fold: bool,
    /// Second pass matching titles with a trailing "(...)" removed.
    pub fuzzy_parenthetical: bool,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        Self {
            strategy: LinkStrategy::Lexical,
            min_surface_len: 2,
            case_fold: true,
            fuzzy_parenthetical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub segment_id: String,
    /// Row within the segment.
    pub row_index: usize,
    pub column_index: usize,
    pub surface: String,
}

/// Why an edge exists: the cell whose surface matched the passage title.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkProvenance {
    pub segment_id: String,
    pub passage_id: String,
    pub surface: String,
    /// Row within the segment.
    pub row: usize,
    pub col: usize,
}

fn is_numeric(cell: &str) -> bool {
    let mut digits = 0;
    for c in cell.chars() {
        if c.is_ascii_digit() {
            digits += 1;
        } else if !matches!(
            c,
            ',' | '.' | '+' | '-' | '%' | '$' | ' ' | '\u{a3}' | '\u{20ac}'
        ) {
            return false;
        }
    }
    digits > 0
}

/// One mention per non-empty, non-numeric cell at least `min_surface_len`
/// chars long after normalization.
pub fn recognize_mentions(segment: &TableSegment, config: &LinkerConfig) -> Vec<Mention> {
    let min_len = config.min_surface_len.max(1);
    let mut out = Vec::new();
    for (r, row) in segment.rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let surface = normalize_cell(cell);
            if surface.chars().count() < min_len || is_numeric(&surface) {
                continue;
            }
            out.push(Mention {
                segment_id: segment.id.clone(),
                row_index: r,
                column_index: c,
                surface,
            });
        }
    }
    out
}

fn match_key(text: &str, case_fold: bool) -> String {
    let norm = normalize_cell(text);
    if case_fold {
        norm.to_lowercase()
    } else {
        norm
    }
}

fn strip_parenthetical(title: &str) -> Option<&str> {
    let t = title.trim_end();
    if !t.ends_with(')') {
        return None;
    }
    let open = t.rfind('(')?;
    let head = t[..open].trim_end();
    (!head.is_empty()).then_some(head)
}

/// The early-fused data graph and the matches that produced its edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Linkage {
    pub graph: BipartiteGraph,
    pub provenance: Vec<LinkProvenance>,
}

impl Linkage {
    /// Passages linked from each (segment id, row within segment).
    pub fn row_links(&self) -> BTreeMap<(String, usize), BTreeSet<String>> {
        let mut map: BTreeMap<(String, usize), BTreeSet<String>> = BTreeMap::new();
        for p in &self.provenance {
            map.entry((p.segment_id.clone(), p.row))
                .or_default()
                .insert(p.passage_id.clone());
        }
        map
    }

    pub fn write_provenance<W: Write>(&self, mut out: W) -> Result<(), LinkError> {
        for p in &self.provenance {
            serde_json::to_writer(&mut out, p).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_provenance<R: BufRead>(input: R) -> Result<Vec<LinkProvenance>, LinkError> {
        let mut out = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| LinkError::Provenance {
                    line: i + 1,
                    message: e.to_string(),
                })?,
            );
        }
        Ok(out)
    }
}

/// Builds the data graph: all corpus nodes, plus a zero-scored edge for
/// every (segment, passage) pair witnessed by a mention/title match.
pub fn link(corpus: &Corpus, config: &LinkerConfig) -> Result<Linkage, LinkError> {
    if config.strategy == LinkStrategy::Remote {
        return Err(LinkError::RemoteUnsupported);
    }

    let mut exact: HashMap<String, Vec<&str>> = HashMap::new();
    let mut fuzzy: HashMap<String, Vec<&str>> = HashMap::new();
    for p in corpus.passages() {
        exact
            .entry(match_key(&p.title, config.case_fold))
            .or_default()
            .push(&p.id);
        if config.fuzzy_parenthetical {
            if let Some(head) = strip_parenthetical(&p.title) {
                fuzzy
                    .entry(match_key(head, config.case_fold))
                    .or_default()
                    .push(&p.id);
            }
        }
    }

    let per_segment: Vec<Vec<LinkProvenance>> = corpus
        .segments()
        .par_iter()
        .map(|segment| {
            let mut found = Vec::new();
            for m in recognize_mentions(segment, config) {
                let key = match_key(&m.surface, config.case_fold);
                let targets = exact.get(&key).or_else(|| {
                    config
                        .fuzzy_parenthetical
                        .then(|| fuzzy.get(&key))
                        .flatten()
                });
                for pid in targets.into_iter().flatten() {
                    found.push(LinkProvenance {
                        segment_id: segment.id.clone(),
                        passage_id: (*pid).to_owned(),
                        surface: m.surface.clone(),
                        row: m.row_index,
                        col: m.column_index,
                    });
                }
            }
            found
        })
        .collect();
    let provenance: Vec<LinkProvenance> = per_segment.into_iter().flatten().collect();

    let nodes = corpus
        .segments()
        .iter()
        .map(|s| NodeRef::segment(&s.id))
        .chain(corpus.passages().iter().map(|p| NodeRef::passage(&p.id)));
    let graph = BipartiteGraph::with_nodes(nodes).add_edges(
        provenance
            .iter()
            .map(|p| ScoredEdge::new(&p.segment_id, &p.passage_id, 0.0)),
    )?;
    Ok(Linkage { graph, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, Table};
    use crate::graph::EdgeKey;

    fn corpus(cells: &[&str], titles: &[&str]) -> Corpus {
        let table = Table {
            id: "grammy".into(),
            title: "Grammy Award for Best Female Country Vocal Performance".into(),
            header: vec!["Year".into(), "Performing artist".into()],
            rows: cells
                .iter()
                .enumerate()
                .map(|(i, c)| vec![format!("{}", 1988 + i), (*c).into()])
                .collect(),
        };
        let passages = titles
            .iter()
            .enumerate()
            .map(|(i, t)| Passage {
                id: format!("p{i}"),
                title: (*t).into(),
                body: "text".into(),
            })
            .collect();
        Corpus::from_parts(vec![table], passages)
            .unwrap()
            .segment_tables(3)
    }

    #[test]
    fn recognizes_person_cell_but_not_year_or_empty() {
        let c = corpus(&["K. T. Oslin", ""], &["x"]);
        let mentions = recognize_mentions(&c.segments()[0], &LinkerConfig::default());
        let surfaces: Vec<_> = mentions.iter().map(|m| m.surface.as_str()).collect();
        assert_eq!(surfaces, vec!["K. T. Oslin"]);
        assert_eq!(mentions[0].column_index, 1);
        assert!(is_numeric("1988"));
        assert!(is_numeric("9,000,000"));
        assert!(!is_numeric("2nd"));
    }

    #[test]
    fn links_cell_to_matching_title() {
        let c = corpus(
            &["K. T. Oslin", "Reba McEntire"],
            &["K. T. Oslin", "Oxford Union"],
        );
        let linkage = link(&c, &LinkerConfig::default()).unwrap();
        assert!(linkage.graph.contains_edge(&EdgeKey::new("grammy#0", "p0")));
        assert_eq!(linkage.graph.edge_count(), 1);
        assert_eq!(
            linkage.graph.score(&EdgeKey::new("grammy#0", "p0")),
            Some(0.0)
        );
        assert_eq!(linkage.provenance.len(), 1);
        assert_eq!(linkage.provenance[0].surface, "K. T. Oslin");
        assert_eq!(linkage.provenance[0].row, 0);
    }

    #[test]
    fn no_matches_keeps_every_node() {
        let c = corpus(&["Nobody"], &["Somebody", "Else"]);
        let g = link(&c, &LinkerConfig::default()).unwrap().graph;
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.node_count(), 1 + 2);
    }

    #[test]
    fn case_folding_controls_match() {
        let c = corpus(&["k. t. oslin"], &["K. T. Oslin"]);
        let folded = link(&c, &LinkerConfig::default()).unwrap();
        assert_eq!(folded.graph.edge_count(), 1);
        let strict = LinkerConfig {
            case_fold: false,
            ..LinkerConfig::default()
        };
        assert_eq!(link(&c, &strict).unwrap().graph.edge_count(), 0);
    }

    #[test]
    fn parenthetical_pass_is_opt_in() {
        let c = corpus(&["Funhouse"], &["Funhouse (Pink album)"]);
        assert_eq!(
            link(&c, &LinkerConfig::default())
                .unwrap()
                .graph
                .edge_count(),
            0
        );
        let fuzzy = LinkerConfig {
            fuzzy_parenthetical: true,
            ..LinkerConfig::default()
        };
        assert_eq!(link(&c, &fuzzy).unwrap().graph.edge_count(), 1);
    }

    #[test]
    fn remote_strategy_is_reported() {
        let c = corpus(&["a"], &["a"]);
        let cfg = LinkerConfig {
            strategy: LinkStrategy::Remote,
            ..LinkerConfig::default()
        };
        assert!(matches!(link(&c, &cfg), Err(LinkError::RemoteUnsupported)));
    }

    #[test]
    fn every_edge_has_a_witness() {
        let c = corpus(&["Ab", "Cd", "Ab"], &["Ab", "Cd", "Ef"]);
        let linkage = link(&c, &LinkerConfig::default()).unwrap();
        for edge in linkage.graph.edges() {
            assert!(linkage
                .provenance
                .iter()
                .any(|p| p.segment_id == edge.segment && p.passage_id == edge.passage));
        }
        let mut buf = Vec::new();
        linkage.write_provenance(&mut buf).unwrap();
        assert_eq!(
            Linkage::read_provenance(&buf[..]).unwrap(),
            linkage.provenance
        );
    }
}
