//! Star-wise refinement of the expanded graph.
//!
//! The refiner first decides whether the query needs an aggregation. If so,
//! every table touched by the expanded graph is restored in full and the
//! refiner picks the rows answering the aggregation; those rows enter as
//! single-row `+aggN` segments together with their linked passages. The
//! graph is then cut into stars and each star's leaves are verified. Leaves
//! that fail verification are removed without touching any score.
//!
//! Two responders share one prompt/parse path: a remote chat model and a
//! deterministic rule oracle that answers in the same response format.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, LazyLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::corpus::{
    Corpus, CorpusError, CorpusOverlay, NodeResolver, Passage, Table, TableSegment,
};
use crate::embed::Embedder;
use crate::graph::{rank_order, BipartiteGraph, EdgeKey, GraphError, ScoredEdge, Star};
use crate::remote::{RemoteError, RetryPolicy, ServiceClient};
use crate::retrieve::{score_new_edges, Reranker, RetrieveError};
use crate::text::{contains_answer, normalize_cell, tokenize};

pub const AGGREGATION_PHRASE: &str = "Therefore, the answer is:";
pub const ROWS_PHRASE: &str = "Therefore, the relevant rows are:";
pub const PASSAGES_PHRASE: &str = "Therefore, relevant passages are:";
pub const ANSWER_PHRASE: &str = "Therefore, the answer is:";

/// Words that make the rule oracle treat a query as an aggregation.
pub const AGGREGATION_CUES: [&str; 12] = [
    "most", "least", "highest", "lowest", "latest", "earliest", "first", "last", "third", "recent",
    "maximum", "minimum",
];

/// Passages linked from each (segment id, row within segment) in the data graph.
pub type RowLinks = BTreeMap<(String, usize), BTreeSet<String>>;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("template {name}: {message}")]
    Template { name: &'static str, message: String },
    #[error("cannot read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub aggregation: String,
    pub rows: String,
    pub passages: String,
    pub reader: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            aggregation: include_str!("../templates/aggregation.txt").to_owned(),
            rows: include_str!("../templates/rows.txt").to_owned(),
            passages: include_str!("../templates/passages.txt").to_owned(),
            reader: include_str!("../templates/reader.txt").to_owned(),
        }
    }
}

impl PromptTemplates {
    /// Reads `aggregation.txt`, `rows.txt`, `passages.txt` and `reader.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self, RefineError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| RefineError::TemplateIo {
                path: path.display().to_string(),
                source,
            })
        };
        let t = Self {
            aggregation: read("aggregation.txt")?,
            rows: read("rows.txt")?,
            passages: read("passages.txt")?,
            reader: read("reader.txt")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        let checks: [(&'static str, &str, &str, &[&str]); 4] = [
            (
                "aggregation",
                &self.aggregation,
                AGGREGATION_PHRASE,
                &["{question}"],
            ),
            (
                "rows",
                &self.rows,
                ROWS_PHRASE,
                &["{question}", "{table}", "{linked_passages}"],
            ),
            (
                "passages",
                &self.passages,
                PASSAGES_PHRASE,
                &["{question}", "{table}", "{linked_passages}"],
            ),
            (
                "reader",
                &self.reader,
                ANSWER_PHRASE,
                &["{question}", "{table_and_linked_passages}"],
            ),
        ];
        for (name, text, phrase, slots) in checks {
            if !text.contains(phrase) {
                return Err(RefineError::Template {
                    name,
                    message: format!("missing answer phrase {phrase:?}"),
                });
            }
            if let Some(slot) = slots.iter().find(|s| !text.contains(*s)) {
                return Err(RefineError::Template {
                    name,
                    message: format!("missing placeholder {slot}"),
                });
            }
        }
        Ok(())
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// `table caption : ..` / `col : ..` / `row N : ..` block; rows are given
/// with their 1-based display numbers.
pub fn render_table<'a>(
    title: &str,
    header: &[String],
    rows: impl IntoIterator<Item = (usize, &'a Vec<String>)>,
) -> String {
    let join = |cells: &[String]| {
        cells
            .iter()
            .map(|c| normalize_cell(c))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut lines = vec![
        format!("table caption : {}", normalize_cell(title)),
        format!("col : {}", join(header)),
    ];
    for (n, row) in rows {
        lines.push(format!("row {n} : {}", join(row)));
    }
    lines.join("\n")
}

fn render_segment(segment: &TableSegment) -> String {
    render_table(
        &segment.title,
        &segment.header,
        segment.rows.iter().enumerate().map(|(i, r)| (i + 1, r)),
    )
}

fn render_row_passages(rows: &[(usize, Vec<&Passage>)]) -> String {
    rows.iter()
        .filter(|(_, ps)| !ps.is_empty())
        .map(|(n, ps)| {
            let mut block = format!("Passages linked to row {n}:");
            for p in ps {
                block.push_str(&format!(
                    "\n- {}: {}",
                    normalize_cell(&p.title),
                    normalize_cell(&p.body)
                ));
            }
            block
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_leaf_passages(leaves: &[&Passage]) -> String {
    let titles: Vec<String> = leaves.iter().map(|p| normalize_cell(&p.title)).collect();
    let mut out = format!(
        "List of linked passages: {}",
        serde_json::to_string(&titles).unwrap_or_else(|_| "[]".into())
    );
    for p in leaves {
        out.push_str(&format!(
            "\nTitle: {}. Content: {}",
            normalize_cell(&p.title),
            normalize_cell(&p.body)
        ));
    }
    out
}

/// Inner text of the final bracketed list after the last `phrase`.
fn bracketed_after<'a>(response: &'a str, phrase: &str) -> Option<&'a str> {
    let rest = &response[response.rfind(phrase)? + phrase.len()..];
    let close = rest.rfind(']')?;
    let open = rest[..close].find('[')?;
    Some(&rest[open + 1..close])
}

pub fn parse_aggregation(response: &str) -> Option<bool> {
    let inner = bracketed_after(response, AGGREGATION_PHRASE)?.trim();
    if inner.eq_ignore_ascii_case("true") {
        Some(true)
    } else if inner.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

static ROW_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\brow\s*(\d+)").unwrap());

/// 1-based row numbers from `f_row([row 3, row 5])`.
pub fn parse_rows(response: &str) -> Option<Vec<usize>> {
    let inner = bracketed_after(response, ROWS_PHRASE)?;
    let rows: Vec<usize> = ROW_REF
        .captures_iter(inner)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    if rows.is_empty() && !inner.trim().is_empty() {
        return None;
    }
    Some(rows)
}

/// Titles from `f_passage(["A", "B"])`; tolerates unquoted lists.
pub fn parse_passages(response: &str) -> Option<Vec<String>> {
    let inner = bracketed_after(response, PASSAGES_PHRASE)?;
    if let Ok(titles) = serde_json::from_str::<Vec<String>>(&format!("[{inner}]")) {
        return Some(titles);
    }
    Some(
        inner
            .split(',')
            .map(|t| {
                t.trim()
                    .trim_matches(|c| c == '"' || c == '\'')
                    .trim()
                    .to_owned()
            })
            .filter(|t| !t.is_empty())
            .collect(),
    )
}

pub fn parse_answer(response: &str) -> Option<String> {
    let rest = &response[response.rfind(ANSWER_PHRASE)? + ANSWER_PHRASE.len()..];
    let answer = rest.trim().trim_end_matches('.').trim();
    (!answer.is_empty()).then(|| answer.to_owned())
}

/// One refiner request: the rendered prompt plus the structured inputs the
/// rule oracle reads instead of the prompt.
#[derive(Debug, Clone, Copy)]
pub struct Ask<'a> {
    pub query: &'a str,
    /// Planted answer, known only when evaluating QA pairs.
    pub hint: Option<&'a str>,
    pub prompt: &'a str,
}

/// Produces raw response text in the template's answer format.
pub trait Responder: Send + Sync {
    fn classify(&self, ask: &Ask) -> Result<String, RemoteError>;
    fn select_rows(&self, ask: &Ask, table: &Table) -> Result<String, RemoteError>;
    fn select_passages(&self, ask: &Ask, leaves: &[&Passage]) -> Result<String, RemoteError>;
    fn answer(&self, ask: &Ask, evidence: &[String]) -> Result<String, RemoteError>;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

/// Client for `POST /chat {model, messages, temperature} -> {content}`.
#[derive(Debug)]
pub struct RemoteChat {
    client: ServiceClient,
    model: String,
    temperature: f64,
}

impl RemoteChat {
    pub fn new(client: ServiceClient, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            client,
            model: model.into(),
            temperature,
        }
    }

    pub fn chat(&self, prompt: &str) -> Result<String, RemoteError> {
        let resp: ChatResponse = self.client.post_json(
            "/chat",
            &ChatRequest {
                model: &self.model,
                messages: [ChatMessage {
                    role: "user",
                    content: prompt,
                }],
                temperature: self.temperature,
            },
        )?;
        Ok(resp.content)
    }
}

impl Responder for RemoteChat {
    fn classify(&self, ask: &Ask) -> Result<String, RemoteError> {
        self.chat(ask.prompt)
    }

    fn select_rows(&self, ask: &Ask, _table: &Table) -> Result<String, RemoteError> {
        self.chat(ask.prompt)
    }

    fn select_passages(&self, ask: &Ask, _leaves: &[&Passage]) -> Result<String, RemoteError> {
        self.chat(ask.prompt)
    }

    fn answer(&self, ask: &Ask, _evidence: &[String]) -> Result<String, RemoteError> {
        self.chat(ask.prompt)
    }
}

/// Deterministic stand-in for the chat model, used for tests and
/// desk-scale evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleOracle;

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "by", "with", "and", "or", "is", "was",
    "who", "what", "when", "where", "which", "how", "did", "does", "that",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Max,
    Min,
}

fn aggregation_intent(tokens: &[String]) -> (Direction, usize, bool) {
    let has = |words: &[&str]| tokens.iter().any(|t| words.contains(&t.as_str()));
    let direction = if has(&["most", "highest", "latest", "recent", "maximum"]) {
        Direction::Max
    } else if has(&["least", "lowest", "earliest", "minimum"])
        || (has(&["first"]) && !has(&["last"]))
    {
        Direction::Min
    } else {
        Direction::Max
    };
    const ORDINALS: [(&str, usize); 9] = [
        ("second", 2),
        ("third", 3),
        ("fourth", 4),
        ("fifth", 5),
        ("sixth", 6),
        ("seventh", 7),
        ("eighth", 8),
        ("ninth", 9),
        ("tenth", 10),
    ];
    let rank = ORDINALS
        .iter()
        .find(|(w, _)| tokens.iter().any(|t| t == w))
        .map_or(1, |(_, n)| *n);
    let temporal = has(&["latest", "earliest", "recent"]);
    (direction, rank, temporal)
}

fn parse_number(cell: &str) -> Option<f64> {
    let cleaned: String = cell
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '%' | ' ' | '\u{a3}' | '\u{20ac}'))
        .collect();
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn month_index(word: &str) -> Option<u32> {
    const MONTHS: [&str; 12] = [
        "january",
        "february",
        "march",
        "april",
        "may",
        "june",
        "july",
        "august",
        "september",
        "october",
        "november",
        "december",
    ];
    let w = word.to_lowercase();
    MONTHS
        .iter()
        .position(|m| *m == w || (w.len() == 3 && m.starts_with(&w)))
        .map(|i| i as u32 + 1)
}

fn year_of(token: &str) -> Option<i32> {
    (token.len() == 4 && token.chars().all(|c| c.is_ascii_digit()))
        .then(|| token.parse().ok())
        .flatten()
}

/// `(year, month, day)` from cells like "30 january 2008", "june 2001",
/// "2008-01-30" or "2008"; missing parts are 0.
fn parse_date(cell: &str) -> Option<(i32, u32, u32)> {
    let tokens = tokenize(cell);
    let year = tokens.iter().find_map(|t| year_of(t))?;
    let month = tokens.iter().find_map(|t| month_index(t));
    let small: Vec<u32> = tokens
        .iter()
        .filter(|t| t.len() <= 2)
        .filter_map(|t| t.parse().ok())
        .collect();
    match month {
        Some(m) => Some((year, m, small.first().copied().unwrap_or(0))),
        None if small.len() >= 2 => Some((year, small[0], small[1])),
        None => Some((year, 0, 0)),
    }
}

fn header_tokens(header: &str) -> Vec<String> {
    tokenize(header)
}

fn is_rank_header(header: &str) -> bool {
    let h = normalize_cell(header).to_lowercase();
    matches!(
        h.as_str(),
        "#" | "no" | "no." | "rank" | "pos" | "pos." | "position"
    )
}

fn is_time_header(header: &str) -> bool {
    header_tokens(header)
        .iter()
        .any(|t| matches!(t.as_str(), "year" | "season" | "date" | "month" | "day"))
}

fn column_parses<T>(table: &Table, col: usize, parse: impl Fn(&str) -> Option<T>) -> bool {
    let mut seen = 0;
    for row in &table.rows {
        let cell = normalize_cell(&row[col]);
        if cell.is_empty() {
            continue;
        }
        if parse(&cell).is_none() {
            return false;
        }
        seen += 1;
    }
    seen > 0
}

fn temporal_keys(table: &Table) -> Option<Vec<Option<(i32, u32, u32)>>> {
    let cols = table.header.len();
    let full_date = (0..cols).find(|&j| {
        column_parses(table, j, |c| {
            parse_date(c).filter(|d| d.1 > 0 && tokenize(c).len() > 1)
        })
    });
    if let Some(j) = full_date {
        return Some(table.rows.iter().map(|r| parse_date(&r[j])).collect());
    }
    let year_col = (0..cols).find(|&j| {
        is_time_header(&table.header[j])
            && column_parses(table, j, |c| tokenize(c).iter().find_map(|t| year_of(t)))
    })?;
    let month_col = (0..cols).find(|&j| column_parses(table, j, |c| month_index(c.trim())));
    Some(
        table
            .rows
            .iter()
            .map(|r| {
                let y = tokenize(&r[year_col]).iter().find_map(|t| year_of(t))?;
                let m = month_col
                    .and_then(|j| month_index(r[j].trim()))
                    .unwrap_or(0);
                Some((y, m, 0))
            })
            .collect(),
    )
}

fn numeric_keys(table: &Table, query_tokens: &[String]) -> Option<Vec<Option<f64>>> {
    let numeric: Vec<usize> = (0..table.header.len())
        .filter(|&j| !is_rank_header(&table.header[j]) && column_parses(table, j, parse_number))
        .collect();
    let mentioned = numeric.iter().copied().find(|&j| {
        header_tokens(&table.header[j])
            .iter()
            .any(|h| !STOPWORDS.contains(&h.as_str()) && query_tokens.contains(h))
    });
    let col = mentioned
        .or_else(|| {
            numeric
                .iter()
                .copied()
                .find(|&j| !is_time_header(&table.header[j]))
        })
        .or_else(|| numeric.first().copied())?;
    Some(
        table
            .rows
            .iter()
            .map(|r| parse_number(&normalize_cell(&r[col])))
            .collect(),
    )
}

fn pick<K: PartialOrd + Copy>(
    keys: &[Option<K>],
    direction: Direction,
    rank: usize,
) -> Option<usize> {
    let mut rows: Vec<(usize, K)> = keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (i, k)))
        .collect();
    rows.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
        let ord = if direction == Direction::Max {
            ord.reverse()
        } else {
            ord
        };
        ord.then(a.0.cmp(&b.0))
    });
    rows.get(rank.saturating_sub(1)).map(|(i, _)| *i)
}

/// 0-based row answering the query's aggregation over `table`, if a numeric
/// or date column supports it.
pub fn rule_aggregate(query: &str, table: &Table) -> Option<usize> {
    let tokens = tokenize(query);
    let (direction, rank, temporal) = aggregation_intent(&tokens);
    if temporal {
        if let Some(keys) = temporal_keys(table) {
            return pick(&keys, direction, rank);
        }
    }
    if let Some(keys) = numeric_keys(table, &tokens) {
        return pick(&keys, direction, rank);
    }
    temporal_keys(table).and_then(|keys| pick(&keys, direction, rank))
}

/// True when the rule oracle considers `passage` relevant: it contains the
/// hint answer, or without a hint shares a content word with the query.
pub fn rule_keeps(query: &str, hint: Option<&str>, passage: &Passage) -> bool {
    let text = format!("{} {}", passage.title, passage.body);
    match hint {
        Some(answer) => contains_answer(&text, answer),
        None => {
            let words: BTreeSet<String> = tokenize(&text).into_iter().collect();
            tokenize(query)
                .iter()
                .any(|t| !STOPWORDS.contains(&t.as_str()) && words.contains(t))
        }
    }
}

impl Responder for RuleOracle {
    fn classify(&self, ask: &Ask) -> Result<String, RemoteError> {
        let tokens = tokenize(ask.query);
        let cue = tokens
            .iter()
            .find(|t| AGGREGATION_CUES.contains(&t.as_str()));
        Ok(match cue {
            Some(word) => format!(
                "The question contains the aggregation cue \"{word}\". {AGGREGATION_PHRASE} f_agg([True])"
            ),
            None => format!("The question contains no aggregation cue. {AGGREGATION_PHRASE} f_agg([False])"),
        })
    }

    fn select_rows(&self, ask: &Ask, table: &Table) -> Result<String, RemoteError> {
        Ok(match rule_aggregate(ask.query, table) {
            Some(row) => format!(
                "Row {} answers the aggregation. {ROWS_PHRASE} f_row([row {}])",
                row + 1,
                row + 1
            ),
            None => format!("No column supports the aggregation. {ROWS_PHRASE} f_row([])"),
        })
    }

    fn select_passages(&self, ask: &Ask, leaves: &[&Passage]) -> Result<String, RemoteError> {
        let kept: Vec<String> = leaves
            .iter()
            .filter(|p| rule_keeps(ask.query, ask.hint, p))
            .map(|p| normalize_cell(&p.title))
            .collect();
        Ok(format!(
            "Kept {} of {} passages. {PASSAGES_PHRASE} f_passage({})",
            kept.len(),
            leaves.len(),
            serde_json::to_string(&kept).unwrap_or_else(|_| "[]".into())
        ))
    }

    fn answer(&self, ask: &Ask, evidence: &[String]) -> Result<String, RemoteError> {
        let found = ask
            .hint
            .filter(|a| evidence.iter().any(|e| contains_answer(e, a)));
        Ok(match found {
            Some(a) => format!("The evidence states it. {ANSWER_PHRASE} {a}"),
            None => format!("The evidence does not state it. {ANSWER_PHRASE} unknown"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    #[default]
    RuleOracle,
    RemoteChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerHandle {
    pub kind: RefinerKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Directory overriding the built-in prompt templates.
    pub templates: Option<String>,
}

impl Default for RefinerHandle {
    fn default() -> Self {
        Self {
            kind: RefinerKind::RuleOracle,
            endpoint: None,
            model: "refiner".into(),
            temperature: 0.0,
            max_retries: 3,
            max_in_flight: 4,
            templates: None,
        }
    }
}

impl RefinerHandle {
    pub fn validate(&self) -> Result<(), String> {
        if self.kind == RefinerKind::RemoteChat && self.endpoint.is_none() {
            return Err("remote_chat refiner needs an endpoint".into());
        }
        if self.temperature != 0.0 {
            return Err(format!(
                "refiner temperature must be 0, got {}",
                self.temperature
            ));
        }
        Ok(())
    }

    pub fn build(&self, retry: &RetryPolicy) -> Result<Refiner, RefineError> {
        let templates = match &self.templates {
            Some(dir) => PromptTemplates::load_dir(Path::new(dir))?,
            None => PromptTemplates::default(),
        };
        let responder: Arc<dyn Responder> = match (self.kind, &self.endpoint) {
            (RefinerKind::RemoteChat, Some(url)) => {
                let retry = RetryPolicy {
                    max_attempts: self.max_retries.max(1),
                    ..retry.clone()
                };
                Arc::new(RemoteChat::new(
                    ServiceClient::new(url, retry, self.max_in_flight),
                    self.model.clone(),
                    self.temperature,
                ))
            }
            _ => Arc::new(RuleOracle),
        };
        Ok(Refiner::new(templates, responder))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerVerdict {
    pub center: String,
    pub kept_passages: Vec<String>,
    /// (table id, 0-based row).
    pub added_rows: Vec<(String, usize)>,
    pub raw_response: String,
    pub parse_status: ParseStatus,
}

/// Inputs of one refinement run.
pub struct RefineInput<'a> {
    pub query: &'a str,
    pub hint: Option<&'a str>,
    /// The expanded graph.
    pub graph: &'a BipartiteGraph,
    pub corpus: &'a Corpus,
    pub row_links: &'a RowLinks,
    /// Scores aggregation edges once on entry.
    pub edge_embedder: &'a dyn Embedder,
    pub edge_reranker: &'a dyn Reranker,
}

#[derive(Debug, Clone)]
pub struct Refinement<'a> {
    /// Corpus plus the aggregation-row segments.
    pub overlay: CorpusOverlay<'a>,
    pub aggregation: bool,
    /// Expanded graph plus aggregation edges.
    pub augmented: BipartiteGraph,
    pub refined: BipartiteGraph,
    pub added: Vec<ScoredEdge>,
    pub removed: Vec<ScoredEdge>,
    pub row_verdicts: Vec<RefinerVerdict>,
    pub verdicts: Vec<RefinerVerdict>,
    pub outage: bool,
}

pub struct Refiner {
    templates: PromptTemplates,
    responder: Arc<dyn Responder>,
}

impl std::fmt::Debug for Refiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Refiner").finish_non_exhaustive()
    }
}

fn title_key(title: &str) -> String {
    normalize_cell(title).to_lowercase()
}

/// Id of the single-row segment holding aggregation result `row` (0-based).
pub fn aggregation_segment_id(table_id: &str, row: usize) -> String {
    format!("{table_id}+agg{}", row + 1)
}

pub fn is_aggregation_segment(id: &str) -> bool {
    id.rsplit_once("+agg")
        .is_some_and(|(_, n)| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
}

impl Refiner {
    pub fn new(templates: PromptTemplates, responder: Arc<dyn Responder>) -> Self {
        Self {
            templates,
            responder,
        }
    }

    pub fn rule_oracle() -> Self {
        Self::new(PromptTemplates::default(), Arc::new(RuleOracle))
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn aggregation_prompt(&self, query: &str) -> String {
        fill(&self.templates.aggregation, &[("question", query)])
    }

    /// Restored table plus per-row linked passages.
    pub fn rows_prompt(
        &self,
        query: &str,
        table: &Table,
        corpus: &Corpus,
        row_links: &RowLinks,
    ) -> String {
        let linked: Vec<(usize, Vec<&Passage>)> = (0..table.rows.len())
            .map(|r| (r + 1, linked_passages(table, r, corpus, row_links)))
            .collect();
        fill(
            &self.templates.rows,
            &[
                ("question", query),
                (
                    "table",
                    &render_table(
                        &table.title,
                        &table.header,
                        table.rows.iter().enumerate().map(|(i, r)| (i + 1, r)),
                    ),
                ),
                ("linked_passages", &render_row_passages(&linked)),
            ],
        )
    }

    pub fn passages_prompt(
        &self,
        query: &str,
        segment: &TableSegment,
        leaves: &[&Passage],
    ) -> String {
        fill(
            &self.templates.passages,
            &[
                ("question", query),
                ("table", &render_segment(segment)),
                ("linked_passages", &render_leaf_passages(leaves)),
            ],
        )
    }

    /// Unparseable responses count as "no aggregation".
    pub fn classify_aggregation(
        &self,
        query: &str,
        hint: Option<&str>,
    ) -> Result<bool, RemoteError> {
        let prompt = self.aggregation_prompt(query);
        let raw = self.responder.classify(&Ask {
            query,
            hint,
            prompt: &prompt,
        })?;
        Ok(parse_aggregation(&raw).unwrap_or_else(|| {
            warn!(response = %raw, "unparseable aggregation classification, treating as false");
            false
        }))
    }

    pub fn aggregate_columns(
        &self,
        query: &str,
        hint: Option<&str>,
        star: &Star,
        corpus: &Corpus,
        row_links: &RowLinks,
    ) -> Result<RefinerVerdict, RefineError> {
        let table = corpus.restore_table(&star.center.id)?;
        let prompt = self.rows_prompt(query, table, corpus, row_links);
        let raw = self.responder.select_rows(
            &Ask {
                query,
                hint,
                prompt: &prompt,
            },
            table,
        )?;
        let (added_rows, parse_status) = match parse_rows(&raw) {
            Some(rows) => {
                let mut added = Vec::new();
                for n in rows {
                    if n == 0 || n > table.rows.len() {
                        warn!(table = %table.id, row = n, "refiner named a row outside the table");
                        continue;
                    }
                    let entry = (table.id.clone(), n - 1);
                    if !added.contains(&entry) {
                        added.push(entry);
                    }
                }
                (added, ParseStatus::Ok)
            }
            None => {
                warn!(table = %table.id, "unparseable row selection");
                (Vec::new(), ParseStatus::Fallback)
            }
        };
        Ok(RefinerVerdict {
            center: star.center.id.clone(),
            kept_passages: Vec::new(),
            added_rows,
            raw_response: raw,
            parse_status,
        })
    }

    /// Keeps the leaves whose titles the refiner lists. Parse failures keep
    /// every leaf.
    pub fn verify_passages<R: NodeResolver + ?Sized>(
        &self,
        query: &str,
        hint: Option<&str>,
        star: &Star,
        resolver: &R,
    ) -> Result<RefinerVerdict, RefineError> {
        let mut verdict = RefinerVerdict {
            center: star.center.id.clone(),
            kept_passages: Vec::new(),
            added_rows: Vec::new(),
            raw_response: String::new(),
            parse_status: ParseStatus::Ok,
        };
        if star.leaves.is_empty() {
            return Ok(verdict);
        }
        let segment = resolver
            .segment(&star.center.id)
            .ok_or_else(|| CorpusError::UnknownSegment(star.center.id.clone()))?;
        let leaves = star
            .leaves
            .iter()
            .map(|(n, _)| {
                resolver
                    .passage(&n.id)
                    .ok_or_else(|| CorpusError::UnknownPassage(n.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prompt = self.passages_prompt(query, segment, &leaves);
        let raw = self.responder.select_passages(
            &Ask {
                query,
                hint,
                prompt: &prompt,
            },
            &leaves,
        )?;
        verdict.kept_passages = match parse_passages(&raw) {
            Some(titles) => {
                let wanted: BTreeSet<String> = titles.iter().map(|t| title_key(t)).collect();
                leaves
                    .iter()
                    .filter(|p| wanted.contains(&title_key(&p.title)))
                    .map(|p| p.id.clone())
                    .collect()
            }
            None => {
                warn!(center = %star.center, "unparseable passage verification, keeping all leaves");
                verdict.parse_status = ParseStatus::Fallback;
                leaves.iter().map(|p| p.id.clone()).collect()
            }
        };
        verdict.raw_response = raw;
        Ok(verdict)
    }

    /// Reader answer over the linearized evidence.
    pub fn read(
        &self,
        query: &str,
        hint: Option<&str>,
        evidence: &[String],
    ) -> Result<String, RemoteError> {
        let prompt = fill(
            &self.templates.reader,
            &[
                ("question", query),
                ("table_and_linked_passages", &evidence.join("\n\n")),
            ],
        );
        let raw = self.responder.answer(
            &Ask {
                query,
                hint,
                prompt: &prompt,
            },
            evidence,
        )?;
        Ok(parse_answer(&raw).unwrap_or_default())
    }

    /// Aggregation (when classified as needed), star decomposition and
    /// per-star verification. Scores of surviving edges are untouched.
    pub fn refine_graph<'a>(&self, input: &RefineInput<'a>) -> Result<Refinement<'a>, RefineError> {
        let mut out = Refinement {
            overlay: CorpusOverlay::new(input.corpus),
            aggregation: false,
            augmented: input.graph.clone(),
            refined: input.graph.clone(),
            added: Vec::new(),
            removed: Vec::new(),
            row_verdicts: Vec::new(),
            verdicts: Vec::new(),
            outage: false,
        };
        match self.classify_aggregation(input.query, input.hint) {
            Ok(flag) => out.aggregation = flag,
            Err(e) => {
                warn!(error = %e, "refiner unreachable, skipping refinement");
                out.outage = true;
                return Ok(out);
            }
        }

        if out.aggregation {
            self.add_aggregation_rows(input, &mut out)?;
        }

        let stars = out.augmented.star_decompose();
        let calls: Vec<Result<RefinerVerdict, RefineError>> = stars
            .par_iter()
            .map(|s| self.verify_passages(input.query, input.hint, s, &out.overlay))
            .collect();
        let attempted = stars.iter().filter(|s| !s.leaves.is_empty()).count();
        let mut failed = 0;
        let mut drop_keys = Vec::new();
        for (star, call) in stars.iter().zip(calls) {
            let verdict = match call {
                Ok(v) => v,
                Err(RefineError::Remote(e)) => {
                    warn!(center = %star.center, error = %e, "verification failed, keeping all leaves");
                    failed += 1;
                    RefinerVerdict {
                        center: star.center.id.clone(),
                        kept_passages: star.leaves.iter().map(|(n, _)| n.id.clone()).collect(),
                        added_rows: Vec::new(),
                        raw_response: String::new(),
                        parse_status: ParseStatus::Fallback,
                    }
                }
                Err(e) => return Err(e),
            };
            let kept: BTreeSet<&str> = verdict.kept_passages.iter().map(String::as_str).collect();
            for (leaf, score) in &star.leaves {
                if !kept.contains(leaf.id.as_str()) {
                    drop_keys.push(EdgeKey::new(&star.center.id, &leaf.id));
                    out.removed
                        .push(ScoredEdge::new(&star.center.id, &leaf.id, *score));
                }
            }
            out.verdicts.push(verdict);
        }
        if attempted > 0 && failed == attempted {
            warn!("every verification call failed, returning the expanded graph");
            out.outage = true;
            out.augmented = input.graph.clone();
            out.refined = input.graph.clone();
            out.added.clear();
            out.removed.clear();
            return Ok(out);
        }
        out.removed.sort_by(rank_order);
        out.refined = out.augmented.remove_edges(drop_keys.iter());
        Ok(out)
    }

    fn add_aggregation_rows<'a>(
        &self,
        input: &RefineInput<'a>,
        out: &mut Refinement<'a>,
    ) -> Result<(), RefineError> {
        // One aggregation call per distinct table, keyed by its first star.
        let mut seen = BTreeSet::new();
        let stars: Vec<Star> = input
            .graph
            .star_decompose()
            .into_iter()
            .filter(|s| {
                input
                    .corpus
                    .segment_to_table()
                    .get(&s.center.id)
                    .is_some_and(|t| seen.insert(t.clone()))
            })
            .collect();
        let calls: Vec<Result<RefinerVerdict, RefineError>> = stars
            .par_iter()
            .map(|s| {
                self.aggregate_columns(input.query, input.hint, s, input.corpus, input.row_links)
            })
            .collect();

        let mut keys = Vec::new();
        for (star, call) in stars.iter().zip(calls) {
            let verdict = match call {
                Ok(v) => v,
                Err(RefineError::Remote(e)) => {
                    warn!(center = %star.center, error = %e, "aggregation call failed");
                    RefinerVerdict {
                        center: star.center.id.clone(),
                        kept_passages: Vec::new(),
                        added_rows: Vec::new(),
                        raw_response: String::new(),
                        parse_status: ParseStatus::Fallback,
                    }
                }
                Err(e) => return Err(e),
            };
            for (table_id, row) in &verdict.added_rows {
                let Some(table) = input.corpus.table(table_id) else {
                    continue;
                };
                let Some(home) = input.corpus.segment_for_row(table_id, *row) else {
                    continue;
                };
                let agg = TableSegment {
                    id: aggregation_segment_id(table_id, *row),
                    table_id: table_id.clone(),
                    title: table.title.clone(),
                    header: table.header.clone(),
                    rows: vec![table.rows[*row].clone()],
                    row_offset: *row,
                };
                let linked = input
                    .row_links
                    .get(&(home.id.clone(), row - home.row_offset))
                    .cloned()
                    .unwrap_or_default();
                for pid in linked {
                    if input.graph.contains_edge(&EdgeKey::new(&home.id, &pid)) {
                        debug!(segment = %home.id, passage = %pid, "row already present with this passage");
                        continue;
                    }
                    keys.push(EdgeKey::new(&agg.id, &pid));
                }
                out.overlay.insert_segment(agg);
            }
            out.row_verdicts.push(verdict);
        }
        keys.sort();
        keys.dedup();
        if keys.is_empty() {
            return Ok(());
        }
        let query_vec = input
            .edge_embedder
            .embed(input.query)
            .map_err(RetrieveError::from)?;
        out.added = score_new_edges(
            input.query,
            &query_vec,
            &keys,
            &out.overlay,
            input.edge_embedder,
            input.edge_reranker,
        )?;
        out.augmented = input.graph.add_edges(out.added.iter().cloned())?;
        Ok(())
    }
}

/// Passages linked in the data graph from `row` (0-based) of `table`.
fn linked_passages<'c>(
    table: &Table,
    row: usize,
    corpus: &'c Corpus,
    row_links: &RowLinks,
) -> Vec<&'c Passage> {
    let Some(seg) = corpus.segment_for_row(&table.id, row) else {
        return Vec::new();
    };
    row_links
        .get(&(seg.id.clone(), row - seg.row_offset))
        .into_iter()
        .flatten()
        .filter_map(|pid| corpus.passage(pid))
        .collect()
}

/// Kept edges by score, then removed edges by score until `k` are listed.
pub fn rank_output(refined: &BipartiteGraph, removed: &[ScoredEdge], k: usize) -> Vec<ScoredEdge> {
    let mut out = refined.ranked_edges();
    out.truncate(k);
    if out.len() < k {
        let mut fill: Vec<ScoredEdge> = removed.to_vec();
        fill.sort_by(rank_order);
        out.extend(fill.into_iter().take(k - out.len()));
    }
    out
}

/// Whether `edge` has an aggregation-row segment as its table endpoint.
pub fn is_aggregation_edge(edge: &ScoredEdge) -> bool {
    is_aggregation_segment(&edge.segment)
}
