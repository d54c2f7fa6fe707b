mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn statrag(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statrag"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("STATRAG_LOG", "error")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    assert_eq!(statrag(&cfg, &["--help"]).status.code(), Some(0));
    assert_eq!(statrag(&cfg, &["--version"]).status.code(), Some(0));
    assert_eq!(statrag(&cfg, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(statrag(&cfg, &["query"]).status.code(), Some(1));
    assert_eq!(statrag(&cfg, &["query", "x", "--k", "0"]).status.code(), Some(1));
    assert_eq!(
        statrag(&cfg, &["query", "x", "--strategy", "fast"]).status.code(),
        Some(1)
    );

    let out = statrag(&dir.path().join("absent.json"), &["index"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));

    let out = statrag(&cfg, &["query", "What is a data breach?", "--strategy", "swi"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no states named"));
}

#[test]
fn misspelled_state_directory_fails_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(corpus.join("Albama/Topic")).unwrap();
    std::fs::write(corpus.join("Albama/Topic/a.txt"), "text").unwrap();
    let cfg = common::write_config(dir.path(), json!({ "corpus_root": corpus }));
    let out = statrag(&cfg, &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown jurisdiction: Albama"));
}

#[test]
fn ingest_emits_one_chunk_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    let out = statrag(&cfg, &["ingest"]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 33);
    assert!(lines.iter().all(|c| c["chunk_id"].as_str().unwrap().contains('#')));
}

#[test]
fn index_is_reproducible_and_queryable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    assert!(statrag(&cfg, &["index", "--out", a.to_str().unwrap()]).status.success());
    assert!(statrag(&cfg, &["index", "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    assert!(statrag(&cfg, &["index"]).status.success());
    let answer = stdout_json(&statrag(&cfg, &["query", "What is a data breach?"]));
    assert_eq!(answer["strategy"]["strategy"], "WDI");
    assert_eq!(answer["partitions_scanned"], 16);

    let answer = stdout_json(&statrag(&cfg, &["query", "Breach notice in Kansas", "--k", "2"]));
    assert_eq!(answer["strategy"]["states"], json!(["Kansas"]));
    assert!(answer["sources"].as_array().unwrap().len() <= 2);

    let out = statrag(&cfg, &["query", "Breach notice in Kansas", "--format", "text"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Looking into the following state(s): Kansas"));
}

#[test]
fn append_adds_only_new_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    let out = statrag(&cfg, &["append", common::fixtures().join("corpus").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "append needs an existing index");

    assert!(statrag(&cfg, &["index"]).status.success());
    let extra = dir.path().join("extra");
    std::fs::create_dir_all(extra.join("Vermont/Data Breach")).unwrap();
    std::fs::write(
        extra.join("Vermont/Data Breach/2435 Notice.txt"),
        "9 V.S.A. § 2435\n\nA data collector shall notify Vermont consumers of a security breach within forty five days.",
    )
    .unwrap();
    let out = statrag(&cfg, &["append", extra.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("appended 1 chunks"));
    let out = statrag(&cfg, &["append", extra.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("appended 0 chunks (1 already indexed)"));

    let answer = stdout_json(&statrag(
        &cfg,
        &["query", "How long do Vermont consumers wait for breach notice?"],
    ));
    assert_eq!(answer["not_found"], false);
    assert_eq!(answer["sources"][0]["citation"], "9 V.S.A. § 2435");
}

#[test]
fn other_embedder_index_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    assert!(statrag(&cfg, &["index"]).status.success());
    let cfg = common::write_config(dir.path(), json!({ "embedder": { "kind": "local_hash", "dim": 128 } }));
    let out = statrag(&cfg, &["query", "Kansas breach"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn eval_covers_every_record_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    let qa = common::fixtures().join("qa.jsonl");
    let run = || {
        let out = statrag(&cfg, &["eval", "--dataset", qa.to_str().unwrap(), "--no-timings"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let first = run();
    assert_eq!(first, run());
    let report: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["per_record"].as_array().unwrap().len(), 59);
    assert_eq!(report["means"]["routing_accuracy"], 1.0);
    assert!(report["excluded"].as_array().unwrap().is_empty());

    let out_path = dir.path().join("report.json");
    let out = statrag(
        &cfg,
        &[
            "eval",
            "--dataset",
            qa.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    let timed: Value = serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert!(timed["per_record"][0]["latency_ms"].is_f64());
    assert!(report["per_record"][0]["latency_ms"].is_null());
}

#[test]
fn bench_writes_csv_rows_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), json!({}));
    let queries = dir.path().join("queries.txt");
    std::fs::write(
        &queries,
        "Kansas breach notice\n\nWhat is a data breach?\nOhio and Oklahoma computer crime\n",
    )
    .unwrap();
    let out = statrag(&cfg, &["bench", "--queries", queries.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "query,strategy,latency_ms,partitions_scanned,states_identified"
    );
    assert_eq!(lines.len(), 1 + 6, "{text}");
    assert!(lines.contains(&"What is a data breach?,SWI,n/a (no states named),n/a (no states named),"));
    assert!(lines
        .iter()
        .any(|l| l.starts_with("Ohio and Oklahoma computer crime,SWI,") && l.ends_with(",2,Ohio;Oklahoma")));

    let out = statrag(
        &cfg,
        &["bench", "--queries", queries.to_str().unwrap(), "--strategy", "swi"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",SWI,")));
}
