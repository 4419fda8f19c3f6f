//! BEIR-format corpora, queries and relevance judgments.
//!
//! Layout on disk:
//!
//! ```text
//! <dataset>/corpus.jsonl        {"_id": .., "title": .., "text": ..}
//! <dataset>/queries.jsonl       {"_id": .., "text": ..}
//! <dataset>/qrels/<split>.tsv   query-id \t corpus-id \t score  (with header)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grade at or above which a judged document counts as relevant.
pub const DEFAULT_RELEVANCE_THRESHOLD: u32 = 1;

const QRELS_HEADER: [&str; 3] = ["query-id", "corpus-id", "score"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open {path}: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}: missing header row `query-id\\tcorpus-id\\tscore`")]
    MissingHeader { path: PathBuf },
    #[error("{path}:{line}: score `{value}` is not a non-negative integer")]
    BadScore {
        path: PathBuf,
        line: usize,
        value: String,
    },
}

impl CorpusError {
    /// True when the error is about an input file that does not exist.
    pub fn is_missing_input(&self) -> bool {
        matches!(self, CorpusError::Missing { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Text that gets embedded: title and body joined by a newline.
    pub fn retrieval_text(&self) -> String {
        format!("{}\n{}", self.title, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Graded qrels: query id -> document id -> grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceJudgments {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a grade, replacing any earlier grade for the same pair.
    pub fn insert(&mut self, qid: impl Into<String>, did: impl Into<String>, grade: u32) {
        self.judgments
            .entry(qid.into())
            .or_default()
            .insert(did.into(), grade);
    }

    pub fn grades(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn grade(&self, qid: &str, did: &str) -> Option<u32> {
        self.judgments.get(qid).and_then(|m| m.get(did)).copied()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    /// Documents judged at or above `threshold` for `qid`. Unjudged queries
    /// yield an empty set.
    pub fn relevant_set(&self, qid: &str, threshold: u32) -> BTreeSet<String> {
        debug_assert!(threshold >= 1, "relevance threshold must be >= 1");
        self.judgments
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g >= threshold)
                    .map(|(d, _)| d.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Free-function form of [`RelevanceJudgments::relevant_set`].
pub fn relevant_set(j: &RelevanceJudgments, qid: &str, threshold: u32) -> BTreeSet<String> {
    j.relevant_set(qid, threshold)
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CorpusError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Missing {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a JSON-lines file, one record per non-blank line, rejecting
/// duplicate ids.
fn load_jsonl<T, F>(path: &Path, id_of: F, validate: fn(&T) -> Result<(), String>) -> Result<Vec<T>, CorpusError>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> &str,
{
    let reader = open(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        validate(&record).map_err(|message| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        let id = id_of(&record);
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: id.to_string(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    load_jsonl(path.as_ref(), |d: &Document| &d.id, |d| {
        if d.id.is_empty() {
            Err("empty `_id`".into())
        } else if d.text.is_empty() {
            Err(format!("document `{}` has empty text", d.id))
        } else {
            Ok(())
        }
    })
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, CorpusError> {
    load_jsonl(path.as_ref(), |q: &Query| &q.id, |q| {
        if q.id.is_empty() {
            Err("empty `_id`".into())
        } else if q.text.is_empty() {
            Err(format!("query `{}` has empty text", q.id))
        } else {
            Ok(())
        }
    })
}

/// Loads a tab-separated qrels file. Later rows for the same
/// (query, document) pair overwrite earlier ones.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<RelevanceJudgments, CorpusError> {
    let path = path.as_ref();
    let reader = open(path)?;
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) => {
                let l = l.map_err(io_err(path))?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
            None => {
                return Err(CorpusError::MissingHeader {
                    path: path.to_path_buf(),
                })
            }
        }
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').map(str::trim).collect();
    if cols != QRELS_HEADER {
        return Err(CorpusError::MissingHeader {
            path: path.to_path_buf(),
        });
    }

    let mut qrels = RelevanceJudgments::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let value = fields[2].trim();
        let grade: u32 = value.parse().map_err(|_| CorpusError::BadScore {
            path: path.to_path_buf(),
            line: lineno,
            value: value.to_string(),
        })?;
        qrels.insert(fields[0].trim(), fields[1].trim(), grade);
    }
    Ok(qrels)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), docs)
}

pub fn save_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), queries)
}

pub fn save_qrels(path: impl AsRef<Path>, qrels: &RelevanceJudgments) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", QRELS_HEADER.join("\t")).map_err(io_err(path))?;
    for (q, docs) in &qrels.judgments {
        for (d, g) in docs {
            writeln!(w, "{q}\t{d}\t{g}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// A loaded BEIR dataset for one qrels split.
#[derive(Debug, Clone)]
pub struct BeirDataset {
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: RelevanceJudgments,
    pub split: String,
}

impl BeirDataset {
    pub fn corpus_path(dir: &Path) -> PathBuf {
        dir.join("corpus.jsonl")
    }

    pub fn queries_path(dir: &Path) -> PathBuf {
        dir.join("queries.jsonl")
    }

    pub fn qrels_path(dir: &Path, split: &str) -> PathBuf {
        dir.join("qrels").join(format!("{split}.tsv"))
    }

    pub fn load(dir: impl AsRef<Path>, split: &str) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        Ok(BeirDataset {
            corpus: load_corpus(Self::corpus_path(dir))?,
            queries: load_queries(Self::queries_path(dir))?,
            qrels: load_qrels(Self::qrels_path(dir, split))?,
            split: split.to_string(),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        let qrels_dir = dir.join("qrels");
        fs::create_dir_all(&qrels_dir).map_err(io_err(&qrels_dir))?;
        save_corpus(Self::corpus_path(dir), &self.corpus)?;
        save_queries(Self::queries_path(dir), &self.queries)?;
        save_qrels(Self::qrels_path(dir, &self.split), &self.qrels)
    }

    /// Queries that have a judgment row, in file order.
    pub fn judged_queries(&self) -> Vec<&Query> {
        self.queries
            .iter()
            .filter(|q| self.qrels.grades(&q.id).is_some())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn single_document() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "{\"_id\":\"d1\",\"title\":\"\",\"text\":\"abc\"}\n");
        let docs = load_corpus(&p).unwrap();
        assert_eq!(
            docs,
            vec![Document {
                id: "d1".into(),
                title: "".into(),
                text: "abc".into()
            }]
        );
        assert_eq!(docs[0].retrieval_text(), "\nabc");
    }

    #[test]
    fn empty_files_are_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "");
        assert!(load_corpus(&p).unwrap().is_empty());
        assert!(load_queries(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"_id\":\"d1\",\"title\":\"t\",\"text\":\"a\"}\n\
             {\"_id\":\"d2\",\"title\":\"t\",\"text\":\"b\"}\n\
             {\"_id\":\"d1\",\"title\":\"t\",\"text\":\"c\"}\n",
        );
        match load_corpus(&p) {
            Err(CorpusError::DuplicateId { line, id, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "d1");
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn queries_load_and_malformed_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "q.jsonl", "{\"_id\":\"q1\",\"text\":\"why deep learning\"}\n");
        let qs = load_queries(&p).unwrap();
        assert_eq!(qs[0].id, "q1");
        assert_eq!(qs[0].text, "why deep learning");

        let p = write(&dir, "bad.jsonl", "{\"_id\":\"q1\",\"text\":\"ok\"}\n{\"_id\": \"q2\", text}\n");
        match load_queries(&p) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let err = load_corpus("/nonexistent/corpus.jsonl").unwrap_err();
        assert!(err.is_missing_input());
    }

    #[test]
    fn qrels_basic_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "query-id\tcorpus-id\tscore\nq1\td1\t1\n");
        let j = load_qrels(&p).unwrap();
        assert_eq!(j.grade("q1", "d1"), Some(1));
        assert_eq!(j.num_pairs(), 1);

        let p = write(&dir, "b.tsv", "query-id\tcorpus-id\tscore\nq1\td1\t1\nq1\td1\t2\n");
        let j = load_qrels(&p).unwrap();
        assert_eq!(j.grade("q1", "d1"), Some(2));
        assert_eq!(j.num_pairs(), 1);
    }

    #[test]
    fn qrels_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "neg.tsv", "query-id\tcorpus-id\tscore\nq1\td1\t-1\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::BadScore { line: 2, .. })));
        let p = write(&dir, "frac.tsv", "query-id\tcorpus-id\tscore\nq1\td1\t1.5\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::BadScore { .. })));
        let p = write(&dir, "nohdr.tsv", "q1\td1\t1\n");
        assert!(matches!(load_qrels(&p), Err(CorpusError::MissingHeader { .. })));
        let p = write(&dir, "empty.tsv", "");
        assert!(matches!(load_qrels(&p), Err(CorpusError::MissingHeader { .. })));
    }

    #[test]
    fn relevant_set_thresholds() {
        let mut j = RelevanceJudgments::new();
        j.insert("q1", "d1", 1);
        j.insert("q1", "d2", 0);
        let s = relevant_set(&j, "q1", 1);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec!["d1".to_string()]);
        assert!(relevant_set(&j, "q9", 1).is_empty());

        let mut j = RelevanceJudgments::new();
        j.insert("q1", "d1", 2);
        j.insert("q1", "d2", 1);
        j.insert("q1", "d3", 0);
        let s = relevant_set(&j, "q1", 2);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec!["d1".to_string()]);
    }
}
