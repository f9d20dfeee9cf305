//! `bigraph` command line: staged workspace commands plus query and eval.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;
use tracing_subscriber::EnvFilter;

use bigraph_core::config::ConfigError;
use bigraph_core::eval::{read_qa_file, HitsTokenizer};
use bigraph_core::synthetic::PlantedSuite;
use bigraph_core::workspace::{write_atomic_path, WorkspaceError};
use bigraph_core::{
    build_indexes, link, run_eval, Corpus, Engine, EvalOptions, PipelineConfig, PipelineError,
    Workspace,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_REMOTE: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "bigraph",
    version,
    about = "Table-text retrieval over an edge-scored bipartite graph"
)]
struct Cli {
    /// Workspace directory holding the staged artifacts.
    #[arg(long, short = 'w', global = true, default_value = "workspace")]
    workspace: PathBuf,
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Log verbosity; repeat for more. RUST_LOG overrides.
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load tables and passages (JSON lines) and segment the tables.
    Ingest {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        passages: PathBuf,
    },
    /// Build the data graph by entity linking.
    Link,
    /// Embed every edge, segment and passage.
    Index,
    /// Answer one question and print the ranked edges.
    Query {
        question: String,
        /// Output size; defaults to the config's `k`.
        #[arg(long, short)]
        k: Option<usize>,
        /// Known answer, passed to the rule-oracle refiner and reader.
        #[arg(long)]
        answer: Option<String>,
        #[command(flatten)]
        toggles: ToggleArgs,
        /// Print the full trace as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a QA file and write report.json and traces.jsonl.
    Eval {
        #[arg(long)]
        qa: PathBuf,
        /// Output directory; defaults to `<workspace>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cutoffs, comma separated; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = TokenizerArg::Whitespace)]
        hits_tokenizer: TokenizerArg,
        /// Do not pass gold answers to the rule oracle.
        #[arg(long)]
        no_oracle_hints: bool,
        #[command(flatten)]
        toggles: ToggleArgs,
    },
    /// Show or check the effective configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Write the planted synthetic suite and its config.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective config as canonical TOML.
    Show,
    /// Validate and print warnings.
    Check,
}

#[derive(Args, Clone, Copy)]
struct ToggleArgs {
    /// Skip query-relevant node expansion.
    #[arg(long)]
    no_qne: bool,
    /// Skip refinement.
    #[arg(long)]
    no_slr: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Whitespace,
    Alphanumeric,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<WorkspaceError> for Failure {
    fn from(e: WorkspaceError) -> Self {
        Failure::new(EXIT_DATA, e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_USAGE, e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_remote() {
            EXIT_REMOTE
        } else if matches!(e, PipelineError::Config(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        Failure::new(code, e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn data<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| Failure::new(EXIT_DATA, e))
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let mut config = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.apply_process_env();
    for warning in config.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(config)
}

fn announce_stand_ins(config: &PipelineConfig) {
    for notice in config.stand_in_notices() {
        eprintln!("note: {notice}");
    }
}

fn open_engine(ws: &Workspace, config: PipelineConfig) -> CliResult<Engine> {
    let corpus = ws.load_corpus()?;
    let linkage = ws.load_linkage(&corpus)?;
    let indexes = ws.load_indexes()?;
    announce_stand_ins(&config);
    Ok(Engine::new(config, corpus, &linkage, indexes)?)
}

fn toggles(config: &PipelineConfig, args: ToggleArgs) -> bigraph_core::StageToggles {
    let mut t = config.stages;
    t.qne &= !args.no_qne;
    t.slr &= !args.no_slr;
    t
}

fn run(cli: Cli) -> CliResult {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Ingest { tables, passages } => {
            let config = load_config(config_path)?;
            let ws = Workspace::open(&cli.workspace)?;
            let corpus = data(Corpus::ingest(&tables, &passages))?.segment_tables(config.max_rows);
            ws.save_corpus(&corpus)?;
            println!(
                "ingested {} tables ({} segments) and {} passages into {}",
                corpus.tables().len(),
                corpus.segments().len(),
                corpus.passages().len(),
                ws.root().display()
            );
        }
        Command::Link => {
            let config = load_config(config_path)?;
            let ws = Workspace::open(&cli.workspace)?;
            let corpus = ws.load_corpus()?;
            let linkage = data(link(&corpus, &config.linker))?;
            ws.save_linkage(&linkage)?;
            println!("linked {} edges", linkage.graph.edge_count());
        }
        Command::Index => {
            let config = load_config(config_path)?;
            let ws = Workspace::open(&cli.workspace)?;
            let corpus = ws.load_corpus()?;
            let linkage = ws.load_linkage(&corpus)?;
            announce_stand_ins(&config);
            let indexes = build_indexes(&config, &corpus, &linkage)?;
            ws.save_indexes(&indexes)?;
            println!(
                "indexed {} edges, {} segments, {} passages",
                indexes.edges.len(),
                indexes.segments.len(),
                indexes.passages.len()
            );
        }
        Command::Query {
            question,
            k,
            answer,
            toggles: t,
            json,
        } => {
            let config = load_config(config_path)?;
            let stages = toggles(&config, t);
            let k = k.unwrap_or(config.k);
            if k == 0 {
                return Err(Failure::new(EXIT_USAGE, anyhow!("-k must be >= 1")));
            }
            let ws = Workspace::open(&cli.workspace)?;
            let engine = open_engine(&ws, config)?;
            let result = engine.query_with(&question, answer.as_deref(), stages, k)?;
            if json {
                let text = data(serde_json::to_string_pretty(&result.trace))?;
                println!("{text}");
            } else {
                print_query(&result.trace);
            }
        }
        Command::Eval {
            qa,
            out,
            ks,
            hits_tokenizer,
            no_oracle_hints,
            toggles: t,
        } => {
            let config = load_config(config_path)?;
            let pairs = data(read_qa_file(&qa))?;
            let options = EvalOptions {
                ks: ks.unwrap_or_else(|| config.eval.ks.clone()),
                hits_budget: config.eval.hits_budget,
                hits_tokenizer: match hits_tokenizer {
                    TokenizerArg::Whitespace => HitsTokenizer::Whitespace,
                    TokenizerArg::Alphanumeric => HitsTokenizer::Alphanumeric,
                },
                toggles: toggles(&config, t),
                oracle_hints: !no_oracle_hints,
            };
            if options.ks.contains(&0) {
                return Err(Failure::new(
                    EXIT_USAGE,
                    anyhow!("--ks values must be >= 1"),
                ));
            }
            let thresholds = config.eval.acceptance.clone();
            let ws = Workspace::open(&cli.workspace)?;
            let engine = open_engine(&ws, config)?;
            let (report, traces) = run_eval(&engine, &pairs, &options);

            let out = out.unwrap_or_else(|| ws.path("eval"));
            data(
                std::fs::create_dir_all(&out)
                    .with_context(|| format!("creating {}", out.display())),
            )?;
            let mut body = data(serde_json::to_vec_pretty(&report))?;
            body.push(b'\n');
            write_atomic_path(&out.join("report.json"), &body)?;
            let mut lines = Vec::new();
            for trace in &traces {
                lines.extend(data(serde_json::to_vec(trace))?);
                lines.push(b'\n');
            }
            write_atomic_path(&out.join("traces.jsonl"), &lines)?;

            println!("queries {} (failed {})", report.queries, report.failures);
            for (k, v) in &report.ar_at {
                println!("AR@{k:<4} {v:.4}   nDCG@{k:<4} {:.4}", report.ndcg_at[k]);
            }
            println!("Hits@{} {:.4}", report.hits_budget, report.hits_4k);
            println!("EM {:.4}  F1 {:.4}", report.em, report.f1);
            println!("wrote {}", out.display());

            let violations = report.violations(&thresholds);
            if !violations.is_empty() {
                for (name, required, actual) in &violations {
                    eprintln!("acceptance: {name} = {actual:.4} < {required:.4}");
                }
                return Err(Failure::new(
                    EXIT_ACCEPTANCE,
                    anyhow!("{} acceptance threshold(s) violated", violations.len()),
                ));
            }
        }
        Command::Config { action } => {
            let config = load_config(config_path)?;
            match action {
                ConfigAction::Show => print!("{}", config.to_toml()?),
                ConfigAction::Check => {
                    announce_stand_ins(&config);
                    println!("config ok");
                }
            }
        }
        Command::GenFixture { out, seed } => {
            let suite = PlantedSuite::generate(seed);
            data(
                suite
                    .write_files(&out)
                    .with_context(|| format!("writing {}", out.display())),
            )?;
            let config = PlantedSuite::config(seed);
            data(std::fs::write(out.join("config.toml"), config.to_toml()?))?;
            info!(seed, "planted suite written");
            println!(
                "wrote {} tables, {} passages, {} questions and config.toml to {}",
                suite.tables.len(),
                suite.passages.len(),
                suite.all().len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn print_query(trace: &bigraph_core::QueryTrace) {
    println!(
        "{:>4}  {:>10}  {:<8}  {:<28}  passage",
        "rank", "score", "stage", "segment"
    );
    for (i, e) in trace.output.iter().enumerate() {
        let stage = serde_json::to_value(e.provenance)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let flag = if e.fallback { "  (refill)" } else { "" };
        println!(
            "{:>4}  {:>10.4}  {:<8}  {:<28}  {}{flag}",
            i + 1,
            e.score,
            stage,
            e.segment_id,
            e.passage_id
        );
    }
    if trace.refiner_outage {
        println!("refiner unavailable: expanded graph passed through unrefined");
    }
    if trace.aggregation {
        println!(
            "aggregation: {} edge(s) added",
            trace.aggregation_edges.len()
        );
    }
    for v in trace.row_verdicts.iter().chain(&trace.verdicts) {
        let rows: Vec<String> = v
            .added_rows
            .iter()
            .map(|(t, r)| format!("{t} row {}", r + 1))
            .collect();
        let detail = if rows.is_empty() {
            format!("kept {:?}", v.kept_passages)
        } else {
            format!("rows {}", rows.join(", "))
        };
        println!("verdict {}: {detail} [{:?}]", v.center, v.parse_status);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
