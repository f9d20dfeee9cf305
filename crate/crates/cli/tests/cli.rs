//! End-to-end runs of the `bigraph` binary on a generated fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bigraph_core::PipelineConfig;

const SEED: &str = "3";

fn bigraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bigraph"))
        .args(args)
        .env_remove("BIGRAPH_EMBED_ENDPOINT")
        .env_remove("BIGRAPH_RERANK_ENDPOINT")
        .env_remove("BIGRAPH_CHAT_ENDPOINT")
        .output()
        .expect("spawn bigraph")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = bigraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        text(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A fixture directory and a workspace built from it through `index`.
struct Built {
    _dir: tempfile::TempDir,
    fixture: PathBuf,
    ws: PathBuf,
    config: PathBuf,
}

impl Built {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("fixture");
        let ws = dir.path().join("ws");
        ok(&["gen-fixture", "--out", s(&fixture), "--seed", SEED]);
        let config = fixture.join("config.toml");
        let base = ["-w", s(&ws), "-c", s(&config)];
        ok(&[
            &base[..],
            &[
                "ingest",
                "--tables",
                s(&fixture.join("tables.jsonl")),
                "--passages",
                s(&fixture.join("passages.jsonl")),
            ],
        ]
        .concat());
        ok(&[&base[..], &["link"]].concat());
        ok(&[&base[..], &["index"]].concat());
        Built {
            _dir: dir,
            fixture,
            ws,
            config,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        bigraph(&[&["-w", s(&self.ws), "-c", s(&self.config)][..], args].concat())
    }

    /// The first `n` lines of a fixture QA file, written next to it.
    fn qa_subset(&self, file: &str, n: usize) -> PathBuf {
        let all = std::fs::read_to_string(self.fixture.join(file)).unwrap();
        let path = self.fixture.join(format!("subset_{n}_{file}"));
        let lines: Vec<&str> = all.lines().take(n).collect();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    }
}

#[test]
fn stages_out_of_order_name_the_missing_command() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let out = bigraph(&["-w", s(&ws), "link"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        text(&out.stderr).contains("run `ingest` first"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_with_code_one() {
    assert_eq!(bigraph(&["query"]).status.code(), Some(1));
    assert_eq!(bigraph(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn reindexing_writes_byte_identical_artifacts() {
    let built = Built::new();
    let files = [
        "graph.jsonl",
        "edge_index.bin",
        "node_index_segments.bin",
        "node_index_passages.bin",
    ];
    let before: Vec<Vec<u8>> = files
        .iter()
        .map(|f| std::fs::read(built.ws.join(f)).unwrap())
        .collect();
    assert!(built.run(&["link"]).status.success());
    assert!(built.run(&["index"]).status.success());
    for (f, bytes) in files.iter().zip(&before) {
        assert_eq!(
            &std::fs::read(built.ws.join(f)).unwrap(),
            bytes,
            "{f} changed"
        );
    }
}

#[test]
fn eval_is_deterministic_and_enforces_acceptance_thresholds() {
    let built = Built::new();
    let qa = built.qa_subset("qa.jsonl", 12);
    let eval = |out: &Path, config: &Path| {
        bigraph(&[
            "-w",
            s(&built.ws),
            "-c",
            s(config),
            "eval",
            "--qa",
            s(&qa),
            "--out",
            s(out),
            "--ks",
            "2,5",
        ])
    };
    let a = built.fixture.join("eval_a");
    let b = built.fixture.join("eval_b");
    assert!(eval(&a, &built.config).status.success());
    assert!(eval(&b, &built.config).status.success());
    for f in ["report.json", "traces.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["queries"], 12);
    assert!(report["ar_at"]["5"].as_f64().unwrap() > 0.9, "{report}");

    let mut strict = PipelineConfig::load(&built.config).unwrap();
    strict.eval.acceptance.insert("ar@5".into(), 1.1);
    let strict_path = built.fixture.join("strict.toml");
    std::fs::write(&strict_path, strict.to_toml().unwrap()).unwrap();
    let out = eval(&built.fixture.join("eval_strict"), &strict_path);
    assert_eq!(out.status.code(), Some(4), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("ar@5"));
}

#[test]
fn aggregation_question_reports_aggregation_edges() {
    let built = Built::new();
    let qa = std::fs::read_to_string(built.qa_subset("qa_aggregation.jsonl", 1)).unwrap();
    let pair: serde_json::Value = serde_json::from_str(qa.trim()).unwrap();
    let question = pair["question"].as_str().unwrap();
    let answer = pair["answer"].as_str().unwrap();

    let out = built.run(&["query", question, "--answer", answer]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("aggregation:"), "{stdout}");
    assert!(stdout.lines().any(|l| l.contains(" agg ")), "{stdout}");

    let json = built.run(&["query", question, "--answer", answer, "--json", "--no-slr"]);
    let trace: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(trace["aggregation"], serde_json::Value::Bool(false));
}
