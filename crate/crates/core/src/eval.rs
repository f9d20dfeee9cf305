//! Retrieval metrics (answer recall, nDCG, token-budget hits), EM/F1, and
//! evaluation runs over QA files with stage ablations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::config::{MetricKey, StageToggles, DEFAULT_HITS_BUDGET};
use crate::pipeline::{Engine, OutputEdge, QueryTrace};
use crate::text::{answer_tokens, contains_answer, normalize_answer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("QA line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_segment_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_passage_ids: Option<Vec<String>>,
}

pub fn read_qa<R: BufRead>(input: R) -> Result<Vec<QAPair>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: "<qa>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| EvalError::Parse {
            line: i + 1,
            message,
        };
        let qa: QAPair = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if qa.question.trim().is_empty() || qa.answer.trim().is_empty() {
            return Err(parse("question and answer must be non-empty".into()));
        }
        out.push(qa);
    }
    Ok(out)
}

pub fn read_qa_file(path: &Path) -> Result<Vec<QAPair>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_qa(std::io::BufReader::new(file))
}

/// True when the answer occurs in any of the first `k` edge texts.
pub fn answer_recall(texts: &[String], answer: &str, k: usize) -> bool {
    texts.iter().take(k).any(|t| contains_answer(t, answer))
}

/// Binary-relevance nDCG@k. The ideal ranking places every relevant item
/// of `labels` first; 0 when nothing is relevant.
pub fn ndcg(labels: &[bool], k: usize) -> f64 {
    let gain = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, rel)| **rel)
        .map(|(i, _)| gain(i))
        .sum();
    let relevant = labels.iter().filter(|r| **r).count().min(k);
    let ideal: f64 = (0..relevant).map(gain).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitsTokenizer {
    #[default]
    Whitespace,
    /// Alphanumeric runs, as used by the embedder.
    Alphanumeric,
}

/// Concatenates edge texts in rank order, keeps the first `budget` tokens
/// and tests answer containment.
pub fn hits_at_tokens(
    texts: &[String],
    answer: &str,
    budget: usize,
    tokenizer: HitsTokenizer,
) -> bool {
    let joined = texts.join(" ");
    let kept = match tokenizer {
        HitsTokenizer::Whitespace => joined
            .split_whitespace()
            .take(budget)
            .collect::<Vec<_>>()
            .join(" "),
        HitsTokenizer::Alphanumeric => crate::text::truncate_to_tokens(&joined, budget).to_owned(),
    };
    contains_answer(&kept, answer)
}

/// SQuAD-style exact match and token F1.
pub fn em_f1(prediction: &str, gold: &str) -> (f64, f64) {
    let em = if !normalize_answer(prediction).is_empty()
        && normalize_answer(prediction) == normalize_answer(gold)
    {
        1.0
    } else {
        0.0
    };
    let pred = answer_tokens(prediction);
    let gold = answer_tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return (em, 0.0);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return (em, 0.0);
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    (em, 2.0 * p * r / (p + r))
}

/// Whether any of the first `k` edges touches a gold segment or passage;
/// `None` when the pair has no gold ids.
pub fn gold_recall(output: &[OutputEdge], qa: &QAPair, k: usize) -> Option<bool> {
    let segs: BTreeSet<&str> = qa
        .gold_segment_ids
        .iter()
        .flatten()
        .map(String::as_str)
        .collect();
    let psgs: BTreeSet<&str> = qa
        .gold_passage_ids
        .iter()
        .flatten()
        .map(String::as_str)
        .collect();
    if segs.is_empty() && psgs.is_empty() {
        return None;
    }
    Some(
        output
            .iter()
            .take(k)
            .any(|o| segs.contains(o.segment_id.as_str()) || psgs.contains(o.passage_id.as_str())),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub hits_budget: usize,
    pub hits_tokenizer: HitsTokenizer,
    pub toggles: StageToggles,
    /// Pass each pair's answer to the rule-oracle refiner and reader.
    pub oracle_hints: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![2, 5, 10, 20, 50, 100],
            hits_budget: DEFAULT_HITS_BUDGET,
            hits_tokenizer: HitsTokenizer::Whitespace,
            toggles: StageToggles::default(),
            oracle_hints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub index: usize,
    pub question: String,
    pub answer: String,
    pub ar: BTreeMap<usize, bool>,
    pub ndcg: BTreeMap<usize, f64>,
    pub hits: bool,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub gold_recall: BTreeMap<usize, bool>,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub toggles: StageToggles,
    pub queries: usize,
    pub failures: usize,
    pub ar_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub hits_budget: usize,
    pub hits_4k: f64,
    pub em: f64,
    pub f1: f64,
    /// Over pairs that carry gold ids.
    pub gold_recall_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryRow>,
}

impl EvalReport {
    pub fn metric(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::AnswerRecall(k) => self.ar_at.get(&k).copied(),
            MetricKey::Ndcg(k) => self.ndcg_at.get(&k).copied(),
            MetricKey::Hits => Some(self.hits_4k),
            MetricKey::ExactMatch => Some(self.em),
            MetricKey::F1 => Some(self.f1),
        }
    }

    /// `(metric, required, actual)` for every threshold not met. Metrics
    /// the report lacks count as 0.
    pub fn violations(&self, thresholds: &BTreeMap<String, f64>) -> Vec<(String, f64, f64)> {
        thresholds
            .iter()
            .filter_map(|(name, min)| {
                let actual = name
                    .parse::<MetricKey>()
                    .ok()
                    .and_then(|k| self.metric(k))
                    .unwrap_or(0.0);
                (actual < *min).then(|| (name.clone(), *min, actual))
            })
            .collect()
    }
}

/// Evaluates every pair concurrently; results are reduced in input order.
pub fn run_eval(
    engine: &Engine,
    qa: &[QAPair],
    options: &EvalOptions,
) -> (EvalReport, Vec<QueryTrace>) {
    let mut ks: Vec<usize> = options.ks.iter().copied().filter(|k| *k > 0).collect();
    ks.sort_unstable();
    ks.dedup();
    let depth = ks.last().copied().unwrap_or(1).max(engine.config().k);

    let results: Vec<(QueryRow, Option<QueryTrace>)> = qa
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let hint = options.oracle_hints.then_some(pair.answer.as_str());
            let mut row = QueryRow {
                index,
                question: pair.question.clone(),
                answer: pair.answer.clone(),
                ar: ks.iter().map(|k| (*k, false)).collect(),
                ndcg: ks.iter().map(|k| (*k, 0.0)).collect(),
                hits: false,
                gold_recall: BTreeMap::new(),
                prediction: String::new(),
                em: 0.0,
                f1: 0.0,
                error: None,
            };
            let result = match engine.query_with(&pair.question, hint, options.toggles, depth) {
                Ok(r) => r,
                Err(e) => {
                    warn!(index, error = %e, "query failed");
                    row.error = Some(e.to_string());
                    return (row, None);
                }
            };
            let labels: Vec<bool> = result
                .texts
                .iter()
                .map(|t| contains_answer(t, &pair.answer))
                .collect();
            for &k in &ks {
                row.ar.insert(k, labels.iter().take(k).any(|l| *l));
                row.ndcg.insert(k, ndcg(&labels, k));
                if let Some(g) = gold_recall(result.output(), pair, k) {
                    row.gold_recall.insert(k, g);
                }
            }
            row.hits = hits_at_tokens(
                &result.texts,
                &pair.answer,
                options.hits_budget,
                options.hits_tokenizer,
            );
            match engine.read(&pair.question, hint, &result.texts) {
                Ok(p) => {
                    let (em, f1) = em_f1(&p, &pair.answer);
                    row.prediction = p;
                    row.em = em;
                    row.f1 = f1;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            (row, Some(result.trace))
        })
        .collect();

    let n = qa.len().max(1) as f64;
    let mut report = EvalReport {
        toggles: options.toggles,
        queries: qa.len(),
        failures: 0,
        ar_at: BTreeMap::new(),
        ndcg_at: BTreeMap::new(),
        hits_budget: options.hits_budget,
        hits_4k: 0.0,
        em: 0.0,
        f1: 0.0,
        gold_recall_at: BTreeMap::new(),
        per_query: Vec::with_capacity(qa.len()),
    };
    let mut traces = Vec::with_capacity(qa.len());
    let mut gold_counts: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (row, trace) in results {
        if row.error.is_some() {
            report.failures += 1;
        }
        for (k, hit) in &row.ar {
            *report.ar_at.entry(*k).or_default() += f64::from(u8::from(*hit));
        }
        for (k, v) in &row.ndcg {
            *report.ndcg_at.entry(*k).or_default() += v;
        }
        for (k, g) in &row.gold_recall {
            let e = gold_counts.entry(*k).or_default();
            e.0 += f64::from(u8::from(*g));
            e.1 += 1.0;
        }
        report.hits_4k += f64::from(u8::from(row.hits));
        report.em += row.em;
        report.f1 += row.f1;
        traces.extend(trace);
        report.per_query.push(row);
    }
    for v in report.ar_at.values_mut().chain(report.ndcg_at.values_mut()) {
        *v /= n;
    }
    report.hits_4k /= n;
    report.em /= n;
    report.f1 /= n;
    report.gold_recall_at = gold_counts
        .into_iter()
        .map(|(k, (hit, total))| (k, hit / total))
        .collect();
    (report, traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn recall_respects_cutoff() {
        let t = texts(&["alpha", "beta", "the answer is Crossett", "delta"]);
        assert!(answer_recall(&t[2..], "Crossett", 1));
        assert!(!answer_recall(&t, "Crossett", 2));
        assert!(answer_recall(&t, "Crossett", 5));
    }

    #[test]
    fn recall_normalizes_hyphens() {
        let t = texts(&["born in North Carolina in 1950"]);
        assert!(answer_recall(&t, "North-Carolina", 1));
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg(&[true, false, false], 3), 1.0);
        assert_eq!(ndcg(&[true], 10), 1.0);
        let expected = 1.0 / 3f64.log2();
        assert!((ndcg(&[false, true], 2) - expected).abs() < 1e-12);
        assert_eq!(ndcg(&[false, false], 2), 0.0);
        assert_eq!(ndcg(&[], 5), 0.0);
    }

    #[test]
    fn hits_budget_boundary() {
        let mut words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        words.push("Crossett".into());
        let t = vec![words.join(" ")];
        assert!(hits_at_tokens(
            &t,
            "Crossett",
            11,
            HitsTokenizer::Whitespace
        ));
        assert!(!hits_at_tokens(
            &t,
            "Crossett",
            10,
            HitsTokenizer::Whitespace
        ));
        assert!(hits_at_tokens(
            &t,
            "Crossett",
            11,
            HitsTokenizer::Alphanumeric
        ));
    }

    #[test]
    fn em_f1_cases() {
        assert_eq!(em_f1("12 August 1971", "12 august 1971."), (1.0, 1.0));
        let (em, f1) = em_f1("August 1971", "12 August 1971");
        assert_eq!(em, 0.0);
        assert!((f1 - 0.8).abs() < 1e-12);
        assert_eq!(em_f1("", "anything"), (0.0, 0.0));
    }

    #[test]
    fn qa_lines_parse_with_optional_gold_ids() {
        let input = "{\"question\":\"q1\",\"answer\":\"a\"}\n\n{\"question\":\"q2\",\"answer\":\"b\",\"gold_passage_ids\":[\"p\"]}\n";
        let qa = read_qa(input.as_bytes()).unwrap();
        assert_eq!(qa.len(), 2);
        assert_eq!(
            qa[1].gold_passage_ids.as_deref(),
            Some(&["p".to_owned()][..])
        );
        let bad = read_qa("{\"question\":\"\",\"answer\":\"a\"}".as_bytes());
        assert!(matches!(bad, Err(EvalError::Parse { line: 1, .. })));
    }

    #[test]
    fn gold_recall_uses_ids_not_text() {
        let out = vec![OutputEdge {
            segment_id: "t+agg5".into(),
            passage_id: "x".into(),
            score: 1.0,
            provenance: crate::pipeline::Provenance::Agg,
            fallback: false,
        }];
        let mut qa = QAPair {
            question: "q".into(),
            answer: "a".into(),
            gold_segment_ids: None,
            gold_passage_ids: None,
        };
        assert_eq!(gold_recall(&out, &qa, 1), None);
        qa.gold_passage_ids = Some(vec!["x".into()]);
        assert_eq!(gold_recall(&out, &qa, 1), Some(true));
        qa.gold_passage_ids = Some(vec!["y".into()]);
        assert_eq!(gold_recall(&out, &qa, 1), Some(false));
    }
}
