#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moler_core::{BeirDataset, RelevanceJudgments};

pub fn moler(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moler"))
        .args(args)
        .output()
        .expect("spawn moler")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn ok(args: &[&str]) -> String {
    let o = moler(args);
    assert!(
        o.status.success(),
        "moler {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three documents, two judged queries.
pub fn toy_dataset(dir: &Path) -> PathBuf {
    let d = |id: &str, title: &str, text: &str| moler_core::Document {
        id: id.into(),
        title: title.into(),
        text: text.into(),
    };
    let q = |id: &str, text: &str| moler_core::Query {
        id: id.into(),
        text: text.into(),
    };
    let mut qrels = RelevanceJudgments::new();
    qrels.insert("q1", "d1", 1);
    qrels.insert("q2", "d2", 1);
    let ds = BeirDataset {
        corpus: vec![
            d("d1", "Vitamin D", "vitamin d improves bone density"),
            d("d2", "", "omega fatty acids and heart disease"),
            d("d3", "", "sleep quality in shift workers"),
        ],
        queries: vec![q("q1", "does vitamin d help bones"), q("q2", "heart disease fatty acids")],
        qrels,
        split: "test".into(),
    };
    let root = dir.join("toy");
    ds.save(&root).unwrap();
    root
}

/// Saves `docs`, `queries` and `qrels` as a BEIR directory under `dir`.
pub fn save_dataset(
    dir: &Path,
    docs: Vec<moler_core::Document>,
    queries: Vec<moler_core::Query>,
    qrels: RelevanceJudgments,
) -> PathBuf {
    let ds = BeirDataset {
        corpus: docs,
        queries,
        qrels,
        split: "test".into(),
    };
    ds.save(dir).unwrap();
    dir.to_path_buf()
}
