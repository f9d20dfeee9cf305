//! Pipeline configuration: a TOML file, environment overrides for remote
//! endpoints, and validation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DEFAULT_MAX_ROWS;
use crate::embed::{EmbedderHandle, EmbedderKind};
use crate::expand::{DEFAULT_BEAM, DEFAULT_FANOUT};
use crate::linker::LinkerConfig;
use crate::refine::{RefinerHandle, RefinerKind};
use crate::remote::{RetryPolicy, ENV_CHAT_ENDPOINT, ENV_EMBED_ENDPOINT, ENV_RERANK_ENDPOINT};
use crate::retrieve::{RerankerHandle, RerankerKind, DEFAULT_K1, DEFAULT_K2};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_HITS_BUDGET: usize = 4096;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub qne: bool,
    pub slr: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            qne: true,
            slr: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrySettings {
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetrySettings {
    fn default() -> Self {
        let p = RetryPolicy::default();
        Self {
            max_attempts: p.max_attempts,
            backoff_ms: p.backoff.as_millis() as u64,
            timeout_secs: p.timeout.as_secs(),
        }
    }
}

impl RetrySettings {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            backoff: Duration::from_millis(self.backoff_ms),
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub hits_budget: usize,
    /// Minimum metric values, keyed `ar@K`, `ndcg@K`, `hits`, `em` or `f1`.
    /// `eval` exits with a distinct code when any is missed.
    pub acceptance: BTreeMap<String, f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![2, 5, 10, 20, 50, 100],
            hits_budget: DEFAULT_HITS_BUDGET,
            acceptance: BTreeMap::new(),
        }
    }
}

/// Metric named by an acceptance key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKey {
    AnswerRecall(usize),
    Ndcg(usize),
    Hits,
    ExactMatch,
    F1,
}

impl std::str::FromStr for MetricKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let at = |prefix: &str| -> Option<Result<usize, String>> {
            s.strip_prefix(prefix).map(|k| {
                k.parse::<usize>()
                    .ok()
                    .filter(|k| *k > 0)
                    .ok_or_else(|| format!("bad cutoff in metric {s:?}"))
            })
        };
        if let Some(k) = at("ar@") {
            return k.map(MetricKey::AnswerRecall);
        }
        if let Some(k) = at("ndcg@") {
            return k.map(MetricKey::Ndcg);
        }
        match s {
            "hits" => Ok(MetricKey::Hits),
            "em" => Ok(MetricKey::ExactMatch),
            "f1" => Ok(MetricKey::F1),
            _ => Err(format!(
                "unknown metric {s:?}; expected ar@K, ndcg@K, hits, em or f1"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub max_rows: usize,
    /// Seed of every deterministic embedder.
    pub seed: u64,
    pub k1: usize,
    pub k2: usize,
    /// Beam width; 0 disables expansion.
    pub b: usize,
    pub fanout: usize,
    /// Output list size.
    pub k: usize,
    pub stages: StageToggles,
    pub linker: LinkerConfig,
    pub edge_embedder: EmbedderHandle,
    pub passage_to_segment: EmbedderHandle,
    pub segment_to_passage: EmbedderHandle,
    pub edge_reranker: RerankerHandle,
    pub node_reranker: RerankerHandle,
    pub refiner: RefinerHandle,
    pub retry: RetrySettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_rows: DEFAULT_MAX_ROWS,
            seed: 0,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            b: DEFAULT_BEAM,
            fanout: DEFAULT_FANOUT,
            k: DEFAULT_K,
            stages: StageToggles::default(),
            linker: LinkerConfig::default(),
            edge_embedder: EmbedderHandle::default(),
            passage_to_segment: EmbedderHandle::default(),
            segment_to_passage: EmbedderHandle::default(),
            edge_reranker: RerankerHandle::default(),
            node_reranker: RerankerHandle::default(),
            refiner: RefinerHandle::default(),
            retry: RetrySettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Canonical serialization: every field, in declaration order.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn propagate_seed(&mut self) {
        let seed = self.seed;
        for h in self.embedder_handles_mut() {
            h.seed = seed;
        }
    }

    fn embedder_handles_mut(&mut self) -> [&mut EmbedderHandle; 3] {
        [
            &mut self.edge_embedder,
            &mut self.passage_to_segment,
            &mut self.segment_to_passage,
        ]
    }

    /// Applies `BIGRAPH_*_ENDPOINT` overrides from `lookup`: a set endpoint
    /// switches the corresponding handles to their remote kind.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let get = |name: &str| lookup(name).filter(|v| !v.trim().is_empty());
        if let Some(url) = get(ENV_EMBED_ENDPOINT) {
            for h in self.embedder_handles_mut() {
                h.kind = EmbedderKind::Remote;
                h.endpoint = Some(url.clone());
            }
        }
        if let Some(url) = get(ENV_RERANK_ENDPOINT) {
            for h in [&mut self.edge_reranker, &mut self.node_reranker] {
                h.kind = RerankerKind::Remote;
                h.endpoint = Some(url.clone());
            }
        }
        if let Some(url) = get(ENV_CHAT_ENDPOINT) {
            self.refiner.kind = RefinerKind::RemoteChat;
            self.refiner.endpoint = Some(url);
        }
    }

    pub fn apply_process_env(&mut self) {
        self.apply_env(|name| std::env::var(name).ok());
    }

    /// Hard errors are returned; soft problems come back as warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_rows == 0 {
            return invalid("max_rows must be >= 1".into());
        }
        if self.k1 == 0 || self.k2 == 0 || self.k == 0 || self.fanout == 0 {
            return invalid("k1, k2, k and fanout must all be >= 1".into());
        }
        if self.k2 > self.k1 {
            return invalid(format!("k2 ({}) must not exceed k1 ({})", self.k2, self.k1));
        }
        for (role, h) in [
            ("edge_embedder", &self.edge_embedder),
            ("passage_to_segment", &self.passage_to_segment),
            ("segment_to_passage", &self.segment_to_passage),
        ] {
            h.validate()
                .map_err(|m| ConfigError::Invalid(format!("{role}: {m}")))?;
        }
        for (role, h) in [
            ("edge_reranker", &self.edge_reranker),
            ("node_reranker", &self.node_reranker),
        ] {
            h.validate()
                .map_err(|m| ConfigError::Invalid(format!("{role}: {m}")))?;
        }
        self.refiner
            .validate()
            .map_err(|m| ConfigError::Invalid(format!("refiner: {m}")))?;
        if self.eval.ks.contains(&0) {
            return invalid("eval.ks must be >= 1".into());
        }
        if self.eval.hits_budget == 0 {
            return invalid("eval.hits_budget must be >= 1".into());
        }
        for key in self.eval.acceptance.keys() {
            key.parse::<MetricKey>().map_err(ConfigError::Invalid)?;
        }
        let mut warnings = Vec::new();
        if self.k > self.k2 + self.b {
            warnings.push(format!(
                "k ({}) exceeds k2 + b ({}); output may be shorter than k",
                self.k,
                self.k2 + self.b
            ));
        }
        Ok(warnings)
    }

    /// One line per role served by a deterministic stand-in.
    pub fn stand_in_notices(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (role, h) in [
            ("edge_embedder", &self.edge_embedder),
            ("passage_to_segment", &self.passage_to_segment),
            ("segment_to_passage", &self.segment_to_passage),
        ] {
            if h.kind == EmbedderKind::Deterministic {
                out.push(format!(
                    "{role}: deterministic hash embedder (seed {})",
                    self.seed
                ));
            }
        }
        for (role, h) in [
            ("edge_reranker", &self.edge_reranker),
            ("node_reranker", &self.node_reranker),
        ] {
            if h.kind == RerankerKind::Passthrough {
                out.push(format!("{role}: passthrough (first-stage scores)"));
            }
        }
        if self.refiner.kind == RefinerKind::RuleOracle {
            out.push("refiner: rule oracle".into());
        }
        out
    }
}
