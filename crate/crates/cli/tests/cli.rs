use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparsealign::store::{write_store, DocumentRecord, TokenEmbeddings};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparsealign"));
    c.env_remove("RUST_LOG").env_remove("SPARSEALIGN_THREADS");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stat(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key:?} in {stdout}"))
        .to_string()
}

/// Planted corpus under `dir/c`.
fn synth(dir: &Path, docs: usize, extra: &[&str]) {
    let docs = docs.to_string();
    let mut args = vec!["synth", "--out-dir", "c", "--docs", &docs, "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&run_in(dir, &args));
}

#[test]
fn flat_index_keeps_every_token() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 100, &["--queries", "10"]);
    let out = ok(&run_in(dir.path(), &["index", "c/docs.mvix", "flat.mvik"]));
    assert_eq!(stat(&out, "tokens"), "3200");
    assert_eq!(stat(&out, "entries"), "3200");
    assert!(dir.path().join("flat.mvik.manifest.json").exists());
}

#[test]
fn pruning_without_heads_names_the_flag() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 20, &["--queries", "5"]);
    let out = run_in(
        dir.path(),
        &["index", "c/docs.mvix", "x.mvik", "--beta-d", "0.2"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--heads"));
    assert!(!dir.path().join("x.mvik").exists());
}

#[test]
fn ivf_fills_all_cells() {
    let dir = TempDir::new().unwrap();
    // 3125 documents of 32 tokens: 10^5 indexed tokens.
    synth(dir.path(), 3125, &["--dim", "16", "--queries", "10"]);
    let out = ok(&run_in(
        dir.path(),
        &[
            "index",
            "c/docs.mvix",
            "ivf.mvik",
            "--kind",
            "ivf",
            "--nlist",
            "64",
            "--seed",
            "1",
        ],
    ));
    assert_eq!(stat(&out, "entries"), "100000");
    let cells = stat(&out, "cells");
    assert!(cells.starts_with("64\tnon-empty 64\t"), "{cells}");
}

fn unit(dim: usize, axis: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

fn tokens(rows: Vec<Vec<f32>>, ids: Vec<u32>, salience: Option<Vec<f32>>) -> TokenEmbeddings {
    let dim = rows[0].len();
    TokenEmbeddings::new(dim, rows.concat(), ids, salience).unwrap()
}

#[test]
fn singleton_search_writes_one_line() {
    let dir = TempDir::new().unwrap();
    let doc = tokens(vec![unit(4, 0), unit(4, 1)], vec![0, 1], None);
    let query = tokens(vec![unit(4, 1)], vec![1], None);
    write_store(
        &[DocumentRecord::new("only", doc)],
        dir.path().join("d.mvix"),
    )
    .unwrap();
    write_store(
        &[DocumentRecord::new("q", query)],
        dir.path().join("q.mvix"),
    )
    .unwrap();
    ok(&run_in(dir.path(), &["index", "d.mvix", "i.mvik"]));
    ok(&run_in(
        dir.path(),
        &[
            "search",
            "i.mvik",
            "d.mvix",
            "q.mvix",
            "--strategy",
            "top-k",
            "--k",
            "1",
            "--out",
            "run.trec",
        ],
    ));
    let run = std::fs::read_to_string(dir.path().join("run.trec")).unwrap();
    assert_eq!(run, "q Q0 only 1 1.000000 sparsealign\n");
}

#[test]
fn search_is_deterministic() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 200, &["--queries", "20"]);
    ok(&run_in(dir.path(), &["index", "c/docs.mvix", "i.mvik"]));
    let search = |out: &str| {
        ok(&run_in(
            dir.path(),
            &[
                "search",
                "i.mvik",
                "c/docs.mvix",
                "c/queries.mvix",
                "--out",
                out,
            ],
        ));
    };
    search("a.trec");
    search("b.trec");
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("a.trec"), read("b.trec"));

    // Manifests agree outside the timing block, apart from the output name.
    let manifest = |name: &str| {
        let mut v: serde_json::Value = serde_json::from_slice(&read(name)).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v["config"]["out"] = serde_json::Value::Null;
        v["outputs"][0]["path"] = serde_json::Value::Null;
        v
    };
    assert_eq!(
        manifest("a.trec.manifest.json"),
        manifest("b.trec.manifest.json")
    );
    let m = manifest("a.trec.manifest.json");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn top_p_logs_effective_k() {
    let dir = TempDir::new().unwrap();
    ok(&run_in(
        dir.path(),
        &[
            "synth",
            "--out-dir",
            "c",
            "--kind",
            "distributed",
            "--queries",
            "2",
            "--dim",
            "16",
        ],
    ));
    ok(&run_in(dir.path(), &["index", "c/docs.mvix", "i.mvik"]));
    let out = bin()
        .current_dir(dir.path())
        .env("RUST_LOG", "sparsealign::retrieve=debug")
        .args([
            "search",
            "i.mvik",
            "c/docs.mvix",
            "c/queries.mvix",
            "--strategy",
            "top-p",
            "--p",
            "0.015",
        ])
        .args(["--neighbors", "50", "--out", "run.trec"])
        .output()
        .unwrap();
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let mut seen = 0;
    for line in stderr.lines().filter(|l| l.contains("top-p k_eff")) {
        let m: usize = line
            .split("m = ")
            .nth(1)
            .unwrap()
            .split(',')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let k: usize = line
            .rsplit("k_eff = ")
            .next()
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        assert_eq!(k, ((0.015 * m as f64).floor() as usize).max(1), "{line}");
        seen += 1;
    }
    assert!(seen > 0, "no k_eff lines in {stderr}");
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "search",
            "i",
            "d",
            "q",
            "--strategy",
            "best-guess",
            "--out",
            "r",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

const RUN: &str = "\
q1 Q0 n1 1 0.9 t
q1 Q0 a 2 0.8 t
q2 Q0 b 1 0.7 t
q2 Q0 n2 2 0.6 t
q2 Q0 c 3 0.5 t
";

const QRELS: &str = "q1 0 a 1\nq2 0 b 2\nq2 0 c 1\nq3 0 z 1\n";

#[test]
fn eval_matches_hand_values() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.trec"), RUN).unwrap();
    std::fs::write(dir.path().join("qrels"), QRELS).unwrap();
    let out = ok(&run_in(
        dir.path(),
        &[
            "eval",
            "run.trec",
            "qrels",
            "--metric",
            "ndcg@10",
            "--metric",
            "mrr@10",
            "--metric",
            "recall@1",
            "--plot-out",
            "pq.tsv",
        ],
    ));
    let value = |m: &str| -> f64 {
        stat(&out, m)
            .strip_prefix("all\t")
            .unwrap()
            .parse()
            .unwrap()
    };
    let q1 = 1.0 / 3f64.log2();
    let q2 = (2.0 + 1.0 / 4f64.log2()) / (2.0 + 1.0 / 3f64.log2());
    // q3 is judged but absent from the run.
    assert_eq!(value("ndcg@10"), (q1 + q2 + 0.0) / 3.0);
    assert_eq!(value("mrr@10"), (0.5 + 1.0 + 0.0) / 3.0);
    assert_eq!(value("recall@1"), (0.0 + 0.5 + 0.0) / 3.0);

    let tsv = std::fs::read_to_string(dir.path().join("pq.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "query_id\tndcg@10\tmrr@10\trecall@1");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("q2\t"));
}

#[test]
fn empty_run_scores_zero_with_warning() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.trec"), "").unwrap();
    std::fs::write(dir.path().join("qrels"), QRELS).unwrap();
    let out = run_in(dir.path(), &["eval", "run.trec", "qrels"]);
    assert_eq!(stat(&ok(&out), "ndcg@10"), "all\t0");
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

struct Distributed {
    dir: TempDir,
}

impl Distributed {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        ok(&run_in(
            dir.path(),
            &[
                "synth",
                "--out-dir",
                "c",
                "--kind",
                "distributed",
                "--seed",
                "5",
            ],
        ));
        ok(&run_in(dir.path(), &["index", "c/docs.mvix", "i.mvik"]));
        Self { dir }
    }

    fn adapt(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "adapt",
            "i.mvik",
            "c/docs.mvix",
            "c/queries.mvix",
            "c/qrels.txt",
            "--neighbors",
            "20",
        ];
        args.extend_from_slice(extra);
        run_in(self.dir.path(), &args)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn adaptation_prefers_top_p_on_distributed_evidence() {
    let d = Distributed::new();
    ok(&d.adapt(&["--out", "report.json", "--plot-out", "folds.tsv"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path("report.json")).unwrap()).unwrap();
    let chosen: Vec<&str> = report["folds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["chosen_strategy"]["kind"].as_str().unwrap())
        .collect();
    let top_p = chosen.iter().filter(|&&k| k == "top-p").count();
    assert!(2 * top_p > chosen.len(), "{chosen:?}");
    let tsv = std::fs::read_to_string(d.path("folds.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), chosen.len() + 1);
    assert!(d.path("report.json.manifest.json").exists());

    let out = d.adapt(&["--out", "r2.json", "--fold-size", "51"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_strategy_adaptation_reduces_to_eval() {
    let d = Distributed::new();
    ok(&d.adapt(&["--out", "report.json", "--grid-k", "2", "--grid-p"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path("report.json")).unwrap()).unwrap();

    let dir = d.dir.path();
    ok(&run_in(
        dir,
        &[
            "search",
            "i.mvik",
            "c/docs.mvix",
            "c/queries.mvix",
            "--k",
            "2",
            "--neighbors",
            "20",
            "--out",
            "run.trec",
        ],
    ));
    let all = ok(&run_in(
        dir,
        &["eval", "run.trec", "c/qrels.txt", "--plot-out", "pq.tsv"],
    ));
    let per_query: BTreeMap<String, f64> = std::fs::read_to_string(dir.join("pq.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (q, v) = l.split_once('\t').unwrap();
            (q.to_string(), v.parse().unwrap())
        })
        .collect();
    let mut fold_means = Vec::new();
    for fold in report["folds"].as_array().unwrap() {
        let held: Vec<f64> = fold["heldout_queries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|q| per_query[q.as_str().unwrap()])
            .collect();
        let expected = held.iter().sum::<f64>() / held.len() as f64;
        assert!((fold["heldout_ndcg10"].as_f64().unwrap() - expected).abs() < 1e-6);
        fold_means.push(expected);
    }
    let mean = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
    assert!((report["mean"].as_f64().unwrap() - mean).abs() < 1e-6);
    // Every query is held out by all folds but one, so the mean tracks the full-set score.
    let full: f64 = stat(&all, "ndcg@10")
        .strip_prefix("all\t")
        .unwrap()
        .parse()
        .unwrap();
    assert!((full - mean).abs() < 0.05);
}

/// Query tokens along axes 0..3, document tokens at known angles, labelled
/// through a vocabulary file.
fn explain_fixture(dir: &Path) {
    let s = 0.6f32;
    let c = 0.8f32;
    let query = tokens(
        vec![unit(4, 0), unit(4, 1), unit(4, 2)],
        vec![0, 1, 2],
        Some(vec![3.0, 1.0, 2.0]),
    );
    let doc = tokens(
        vec![
            vec![c, s, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![s, c, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
        ],
        vec![3, 2, 4, 5, 0],
        Some(vec![0.5, 4.0, 1.0, 0.1, 2.0]),
    );
    write_store(&[DocumentRecord::new("doc", doc)], dir.join("d.mvix")).unwrap();
    write_store(&[DocumentRecord::new("q", query)], dir.join("q.mvix")).unwrap();
    std::fs::write(
        dir.join("vocab.txt"),
        "cat\ndog\nfish\nkitten\npuppy\nrock\n",
    )
    .unwrap();
}

fn explain(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut args = vec![
        "explain",
        "d.mvix",
        "q.mvix",
        "--query-id",
        "q",
        "--vocab",
        "vocab.txt",
    ];
    args.extend_from_slice(extra);
    ok(&run_in(dir, &args))
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn explain_alignments_match_hand_argmax() {
    let dir = TempDir::new().unwrap();
    explain_fixture(dir.path());
    let lines = explain(
        dir.path(),
        &["--top-query-frac", "1.0", "--top-doc-frac", "1.0"],
    );
    assert!(lines[0].starts_with("query q -> document doc"));
    let pairs: Vec<(String, String)> = lines
        .iter()
        .filter(|l| l.trim_start().starts_with("q["))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].to_string(), f[4].to_string())
        })
        .collect();
    // Salience order 3, 2, 1 puts cat, fish, dog first to last.
    let expected = [("cat", "cat"), ("fish", "fish"), ("dog", "puppy")];
    assert_eq!(pairs, expected.map(|(a, b)| (a.to_string(), b.to_string())));
    let doc_lines: Vec<&String> = lines
        .iter()
        .filter(|l| l.trim_start().starts_with("d["))
        .collect();
    assert_eq!(doc_lines.len(), 5);
    let mut positions: Vec<&str> = doc_lines
        .iter()
        .map(|l| l.trim_start().split('\t').next().unwrap())
        .collect();
    assert_eq!(positions[0], "d[1]");
    positions.sort();
    positions.dedup();
    assert_eq!(positions.len(), 5);
}

#[test]
fn explain_default_fractions_round_up() {
    let dir = TempDir::new().unwrap();
    explain_fixture(dir.path());
    let lines = explain(dir.path(), &["--doc-id", "doc"]);
    let q = lines
        .iter()
        .filter(|l| l.trim_start().starts_with("q["))
        .count();
    let d = lines
        .iter()
        .filter(|l| l.trim_start().starts_with("d["))
        .count();
    // ceil(0.5 * 3) and ceil(0.2 * 5).
    assert_eq!((q, d), (2, 1));
}

#[test]
fn train_writes_heads_and_trace() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 60, &["--queries", "8", "--dim", "16"]);
    let out = ok(&run_in(
        dir.path(),
        &[
            "train",
            "c/docs.mvix",
            "c/queries.mvix",
            "c/qrels.txt",
            "--out",
            "heads.json",
            "--loss-out",
            "loss.csv",
        ],
    ));
    assert!(out.contains("500 steps"));
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 501);
    ok(&run_in(
        dir.path(),
        &[
            "index",
            "c/docs.mvix",
            "p.mvik",
            "--beta-d",
            "0.25",
            "--heads",
            "heads.json",
        ],
    ));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();
    let missing = run_in(dir.path(), &["index", "nope.mvix", "x.mvik"]);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(dir.path().join("junk.mvix"), b"MVIXgarbage").unwrap();
    let corrupt = run_in(dir.path(), &["index", "junk.mvix", "x.mvik"]);
    assert_eq!(corrupt.status.code(), Some(4));

    std::fs::write(dir.path().join("bad.trec"), "q1 Q0 d1 one 0.5 t\n").unwrap();
    std::fs::write(dir.path().join("qrels"), QRELS).unwrap();
    let malformed = run_in(dir.path(), &["eval", "bad.trec", "qrels"]);
    assert_eq!(malformed.status.code(), Some(4));

    let threads = bin()
        .current_dir(dir.path())
        .env("SPARSEALIGN_THREADS", "zero")
        .args(["eval", "bad.trec", "qrels"])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}
