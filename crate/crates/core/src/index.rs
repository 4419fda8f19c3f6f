//! Exact dense retrieval over an in-memory matrix of unit rows.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, EmbeddingVector};
use crate::corpus::Document;

const EMBED_BATCH: usize = 256;
const MANIFEST_FILE: &str = "index.json";
const MATRIX_FILE: &str = "matrix.f32";
const IDS_FILE: &str = "doc_ids.txt";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, probe has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("ranked list contains `{0}` twice")]
    DuplicateDoc(String),
    #[error("ranked list is not sorted by (-score, id) at position {0}")]
    Unsorted(usize),
    #[error("non-finite score for `{0}`")]
    NonFiniteScore(String),
    #[error("depth must be positive")]
    ZeroDepth,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

/// One entry of a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Total order used everywhere a ranking is produced: score descending,
/// then document id ascending.
pub fn ranking_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Scores are non-increasing, ties go to the smaller id, ids are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    label: String,
    entries: Vec<ScoredDoc>,
}

impl RankedList {
    /// Sorts arbitrary (id, score) pairs into a ranking.
    pub fn from_scores(
        label: impl Into<String>,
        scores: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self, IndexError> {
        let mut entries: Vec<ScoredDoc> = scores
            .into_iter()
            .map(|(doc_id, score)| ScoredDoc { doc_id, score })
            .collect();
        if let Some(bad) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(IndexError::NonFiniteScore(bad.doc_id.clone()));
        }
        entries.sort_by(ranking_order);
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(IndexError::DuplicateDoc(e.doc_id.clone()));
            }
        }
        Ok(RankedList {
            label: label.into(),
            entries,
        })
    }

    /// Takes entries that must already be in ranking order.
    pub fn from_sorted(label: impl Into<String>, entries: Vec<ScoredDoc>) -> Result<Self, IndexError> {
        let list = RankedList {
            label: label.into(),
            entries,
        };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        let mut seen = std::collections::HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(IndexError::NonFiniteScore(e.doc_id.clone()));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(IndexError::DuplicateDoc(e.doc_id.clone()));
            }
            if i > 0 && ranking_order(&self.entries[i - 1], e) != Ordering::Less {
                return Err(IndexError::Unsorted(i));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn entries(&self) -> &[ScoredDoc] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// First `k` document ids.
    pub fn top_ids(&self, k: usize) -> Vec<String> {
        self.doc_ids().take(k).map(str::to_string).collect()
    }

    pub fn truncated(mut self, depth: Depth) -> Self {
        if let Depth::Top(k) = depth {
            self.entries.truncate(k);
        }
        self
    }
}

/// How many documents a ranking keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Depth {
    #[default]
    All,
    Top(usize),
}

impl Depth {
    pub fn top(k: usize) -> Result<Self, IndexError> {
        if k == 0 {
            Err(IndexError::ZeroDepth)
        } else {
            Ok(Depth::Top(k))
        }
    }

    pub fn limit(self, n: usize) -> usize {
        match self {
            Depth::All => n,
            Depth::Top(k) => k.min(n),
        }
    }
}

impl FromStr for Depth {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Depth::All);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("depth must be positive".into()),
            Ok(k) => Ok(Depth::Top(k)),
            Err(_) => Err(format!("invalid depth `{s}` (expected `all` or a positive integer)")),
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::All => f.write_str("all"),
            Depth::Top(k) => write!(f, "{k}"),
        }
    }
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    doc_count: usize,
    embedder: String,
}

/// Row-major matrix of L2-normalized document embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    doc_ids: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
    embedder: String,
}

impl CorpusIndex {
    /// Normalizes and stores the given rows. Rows must share a dimension and
    /// be non-zero.
    pub fn from_vectors(
        doc_ids: Vec<String>,
        vectors: &[EmbeddingVector],
        embedder: impl Into<String>,
    ) -> Result<Self, IndexError> {
        if doc_ids.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        if doc_ids.len() != vectors.len() {
            return Err(IndexError::Corrupt(format!(
                "{} ids for {} vectors",
                doc_ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].dim();
        let mut matrix = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.dim() != dim {
                return Err(IndexError::DimMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            let n = v.norm();
            if n == 0.0 {
                return Err(IndexError::ZeroVector);
            }
            matrix.extend(v.values().iter().map(|x| (x / n) as f32));
        }
        Ok(CorpusIndex {
            doc_ids,
            matrix,
            dim,
            embedder: embedder.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine of `probe` against every row, in row order.
    pub fn scores(&self, probe: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        if probe.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: probe.dim(),
            });
        }
        let n = probe.norm();
        if n == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let p = probe.values();
        Ok((0..self.len())
            .map(|i| {
                let dot: f64 = self.row(i).iter().zip(p).map(|(&r, &x)| f64::from(r) * x).sum();
                (dot / n).clamp(-1.0, 1.0)
            })
            .collect())
    }

    pub fn rank(&self, probe: &EmbeddingVector, depth: Depth, label: &str) -> Result<RankedList, IndexError> {
        let scores = self.scores(probe)?;
        let mut entries: Vec<ScoredDoc> = self
            .doc_ids
            .iter()
            .zip(scores)
            .map(|(id, score)| ScoredDoc {
                doc_id: id.clone(),
                score,
            })
            .collect();
        let keep = depth.limit(entries.len());
        if keep < entries.len() {
            entries.select_nth_unstable_by(keep, ranking_order);
            entries.truncate(keep);
        }
        entries.sort_by(ranking_order);
        Ok(RankedList {
            label: label.to_string(),
            entries,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), IndexError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            dim: self.dim,
            doc_count: self.len(),
            embedder: self.embedder.clone(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        )?;
        let bytes: Vec<u8> = self.matrix.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(dir.join(MATRIX_FILE), bytes)?;
        let mut ids = fs::File::create(dir.join(IDS_FILE))?;
        for id in &self.doc_ids {
            writeln!(ids, "{id}")?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, IndexError> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        let doc_ids: Vec<String> = fs::read_to_string(dir.join(IDS_FILE))?
            .lines()
            .map(str::to_string)
            .collect();
        let bytes = fs::read(dir.join(MATRIX_FILE))?;
        if doc_ids.len() != manifest.doc_count {
            return Err(IndexError::Corrupt(format!(
                "manifest says {} docs, id file has {}",
                manifest.doc_count,
                doc_ids.len()
            )));
        }
        if bytes.len() != manifest.doc_count * manifest.dim * 4 {
            return Err(IndexError::Corrupt(format!(
                "matrix has {} bytes, expected {}",
                bytes.len(),
                manifest.doc_count * manifest.dim * 4
            )));
        }
        let matrix = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(CorpusIndex {
            doc_ids,
            matrix,
            dim: manifest.dim,
            embedder: manifest.embedder,
        })
    }
}

/// Embeds every document's retrieval text and builds the index.
pub fn build_index(docs: &[Document], embedder: &dyn Embedder) -> Result<CorpusIndex, IndexError> {
    if docs.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let mut vectors = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(Document::retrieval_text).collect();
        vectors.extend(embedder.embed(&texts)?);
    }
    let ids = docs.iter().map(|d| d.id.clone()).collect();
    CorpusIndex::from_vectors(ids, &vectors, embedder.identifier())
}

/// Ranks the whole index against `probe`, keeping `depth` documents.
pub fn rank_all(probe: &EmbeddingVector, idx: &CorpusIndex, depth: Depth) -> Result<RankedList, IndexError> {
    idx.rank(probe, depth, "")
}
