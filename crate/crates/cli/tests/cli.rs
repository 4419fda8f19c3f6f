#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::fs;

use moler_core::{MockChat, PromptTemplates};
use support::{moler, ok, s, toy_dataset};
use tempfile::tempdir;

#[test]
fn ingest_reports_counts_and_is_idempotent() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    let out = ok(&["ingest", "--data", s(&data)]);
    assert_eq!(out.trim(), "docs=3 queries=2");
    let first = fs::read(data.join("manifest.json")).unwrap();
    ok(&["ingest", "--data", s(&data)]);
    assert_eq!(first, fs::read(data.join("manifest.json")).unwrap());
}

#[test]
fn missing_inputs_and_bad_flags_exit_two() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    fs::remove_file(data.join("qrels").join("test.tsv")).unwrap();
    assert_eq!(moler(&["ingest", "--data", s(&data)]).status.code(), Some(2));
    assert_eq!(moler(&["ingest", "--data", s(&tmp.path().join("nope"))]).status.code(), Some(2));
    assert_eq!(moler(&["frobnicate"]).status.code(), Some(2));

    let data = toy_dataset(&tmp.path().join("b"));
    ok(&["index", "--data", s(&data), "--backend", "offline"]);
    let o = moler(&["run", "--data", s(&data), "--strategy", "bm25", "--backend", "offline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown strategy"));
    let o = moler(&["run", "--data", s(&data), "--strategy", "mslf", "--backend", "mock"]);
    assert_eq!(o.status.code(), Some(2), "mock without a script");
}

#[test]
fn unscripted_prompt_is_a_runtime_failure() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    ok(&["index", "--data", s(&data), "--backend", "offline"]);
    let script = tmp.path().join("empty.jsonl");
    MockChat::new().save(&script).unwrap();
    let run = tmp.path().join("r.trec");
    let o = moler(&[
        "run", "--data", s(&data), "--backend", "mock", "--mock-script", s(&script), "--strategy", "mslf", "--out",
        s(&run),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn raw_offline_run_matches_golden() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    ok(&["index", "--data", s(&data), "--backend", "offline"]);
    let run = tmp.path().join("raw.trec");
    ok(&["run", "--data", s(&data), "--backend", "offline", "--strategy", "raw", "--seed", "7", "--out", s(&run)]);
    let golden = include_str!("golden/raw_offline.trec");
    assert_eq!(fs::read_to_string(&run).unwrap(), golden);
}

#[test]
fn mslf_with_mock_makes_two_calls_per_query() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    ok(&["index", "--data", s(&data), "--backend", "offline"]);
    let t = PromptTemplates::default();
    let mut mock = MockChat::new();
    common::script_all(&mut mock, &t, "does vitamin d help bones", 3, "vitamin d bone density");
    common::script_all(&mut mock, &t, "heart disease fatty acids", 3, "omega fatty acids heart");
    let script = tmp.path().join("script.jsonl");
    mock.save(&script).unwrap();
    let run = tmp.path().join("mslf.trec");
    let out = ok(&[
        "run", "--data", s(&data), "--backend", "mock", "--mock-script", s(&script), "--strategy", "mslf", "--out",
        s(&run),
    ]);
    assert!(out.contains("chat_calls=4"), "{out}");
    let trace = fs::read_to_string(run.with_extension("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["chat_calls"], 2);
        assert_eq!(v["strategy"], "mslf");
        assert_eq!(v["sub_queries"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn eval_prints_hand_computed_table_and_skip_count() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    let run = tmp.path().join("hand.trec");
    // q1: relevant d1 at rank 2; q2: relevant d2 at rank 1; q9 is unjudged
    fs::write(
        &run,
        "q1 Q0 d3 1 0.9 t\nq1 Q0 d1 2 0.8 t\nq2 Q0 d2 1 0.7 t\nq9 Q0 d1 1 0.5 t\n",
    )
    .unwrap();
    let out = ok(&["eval", "--data", s(&data), "--run", s(&run), "--metric", "recall@1k,ndcg@10"]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0], ["recall@1k", "100.00", "2", "1"]);
    // (1/log2(3) + 1) / 2 = 0.81546...
    assert_eq!(rows[1], ["ndcg@10", "81.55", "2", "1"]);
    let tsv = fs::read_to_string(run.with_extension("eval.tsv")).unwrap();
    assert!(tsv.lines().count() >= 3);

    let out = ok(&["eval", "--data", s(&data), "--run", s(&run), "--metric", "recall@10,ndcg@10"]);
    assert!(out.contains("recall@10 ") && out.contains("ndcg@10 "));
    assert_eq!(moler(&["eval", "--data", s(&data), "--run", s(&run), "--metric", "map@5"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_strategy_and_count() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    ok(&["index", "--data", s(&data), "--backend", "offline"]);
    let csv = tmp.path().join("sweep.csv");
    let args = [
        "sweep", "--data", s(&data), "--backend", "offline", "--strategies", "lc_mqr,mmlf", "--n-values", "1,2,3",
        "--seed", "7", "--out", s(&csv),
    ];
    ok(&args);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "strategy,n,recall@1k,ndcg@10,chat_calls");
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("mmlf,3,") && lines[6].ends_with(",8"));
    ok(&args);
    assert_eq!(text, fs::read_to_string(&csv).unwrap());
}

#[test]
fn toy_trainers_are_deterministic() {
    let tmp = tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for p in [&a, &b] {
        ok(&["rl-train-toy", "--variant", "grpo", "--steps", "40", "--seed", "3", "--out", s(p)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 41);

    for p in [&a, &b] {
        ok(&["mol-train-toy", "--steps", "25", "--seed", "3", "--out", s(p)]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,ce_domain,kl_general");
    assert_eq!(lines.len(), 26);
}

#[test]
fn mol_accepts_text_corpora() {
    let tmp = tempdir().unwrap();
    let dom = tmp.path().join("domain.txt");
    let gen = tmp.path().join("general.txt");
    fs::write(&dom, "the cell divides\nthe cell grows\n").unwrap();
    fs::write(&gen, "the market opens\nthe market closes\n").unwrap();
    let vocab = tmp.path().join("vocab.txt");
    let out = tmp.path().join("c.csv");
    ok(&[
        "mol-train-toy", "--domain", s(&dom), "--general", s(&gen), "--steps", "10", "--out", s(&out),
        "--vocab-out", s(&vocab),
    ]);
    assert_eq!(fs::read_to_string(&vocab).unwrap().lines().count(), 7);
    fs::write(&gen, "only one line\n").unwrap();
    let o = moler(&["mol-train-toy", "--domain", s(&dom), "--general", s(&gen), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempdir().unwrap();
    let data = toy_dataset(tmp.path());
    let cfg = tmp.path().join("moler.toml");
    fs::write(
        &cfg,
        format!("data = {:?}\nbackend = \"offline\"\nstrategy = \"mslf\"\nseed = 7\n", s(&data)),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "index"]);
    let run = tmp.path().join("r.trec");
    let out = ok(&["--config", s(&cfg), "run", "--out", s(&run)]);
    assert!(out.starts_with("strategy=mslf "), "{out}");
    let out = ok(&["run", "--config", s(&cfg), "--strategy", "raw", "--out", s(&run)]);
    assert!(out.starts_with("strategy=raw "), "{out}");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(moler(&["--config", s(&cfg), "ingest"]).status.code(), Some(2));
}
