//! Recall@k and nDCG@k, per query and averaged over a run.
//!
//! Queries without any relevant judgment are skipped (reported, not scored)
//! rather than counted as 0 or 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{RelevanceJudgments, DEFAULT_RELEVANCE_THRESHOLD};
use crate::index::RankedList;

/// Gain applied to a grade in DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Gain {
    /// `g(r) = r`
    #[default]
    Linear,
    /// `g(r) = 2^r - 1`
    Exponential,
}

impl Gain {
    pub fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => f64::from(grade),
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

impl FromStr for Gain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Gain::Linear),
            "exp" | "exponential" => Ok(Gain::Exponential),
            _ => Err(format!("unknown gain `{s}` (expected linear or exp)")),
        }
    }
}

/// |top-k ∩ relevant| / |relevant|, or `None` when nothing is relevant.
pub fn recall_at_k(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.doc_ids().take(k).filter(|d| relevant.contains(*d)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// DCG@k / IDCG@k with `1/log2(i+1)` discounts, or `None` when no grade is
/// positive.
pub fn ndcg_at_k(ranked: &RankedList, grades: &BTreeMap<String, u32>, k: usize, gain: Gain) -> Option<f64> {
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() || k == 0 {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain.apply(g) * discount(i)).sum();
    let dcg: f64 = ranked
        .doc_ids()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain.apply(grades.get(d).copied().unwrap_or(0)) * discount(i))
        .sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    Recall,
    Ndcg,
}

/// A metric at a cutoff, written `recall@10`, `ndcg@10`, `recall@1k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricSpec {
    pub fn recall(k: usize) -> Self {
        MetricSpec { kind: MetricKind::Recall, k }
    }

    pub fn ndcg(k: usize) -> Self {
        MetricSpec { kind: MetricKind::Ndcg, k }
    }

    /// Parses a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl FromStr for MetricSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| format!("metric `{s}` needs a cutoff, e.g. recall@10"))?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "recall" => MetricKind::Recall,
            "ndcg" => MetricKind::Ndcg,
            other => return Err(format!("unknown metric `{other}`")),
        };
        let k = k.to_ascii_lowercase();
        let k = match k.strip_suffix('k') {
            Some(thousands) => thousands.parse::<usize>().map(|v| v * 1000),
            None => k.parse::<usize>(),
        }
        .map_err(|_| format!("bad cutoff in `{s}`"))?;
        if k == 0 {
            return Err(format!("cutoff must be positive in `{s}`"));
        }
        Ok(MetricSpec { kind, k })
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
        };
        if self.k >= 1000 && self.k.is_multiple_of(1000) {
            write!(f, "{name}@{}k", self.k / 1000)
        } else {
            write!(f, "{name}@{}", self.k)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub relevance_threshold: u32,
    pub gain: Gain,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            gain: Gain::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub spec: MetricSpec,
    pub per_query: BTreeMap<String, f64>,
    /// Mean over non-skipped queries; `None` if every query was skipped.
    pub mean: Option<f64>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub results: Vec<MetricResult>,
}

/// Scores one query under one metric.
pub fn score_query(
    spec: MetricSpec,
    qid: &str,
    ranked: &RankedList,
    qrels: &RelevanceJudgments,
    opts: &EvalOptions,
) -> Option<f64> {
    match spec.kind {
        MetricKind::Recall => recall_at_k(ranked, &qrels.relevant_set(qid, opts.relevance_threshold), spec.k),
        MetricKind::Ndcg => ndcg_at_k(ranked, qrels.grades(qid)?, spec.k, opts.gain),
    }
}

pub fn evaluate_run(
    run: &BTreeMap<String, RankedList>,
    qrels: &RelevanceJudgments,
    specs: &[MetricSpec],
    opts: &EvalOptions,
) -> Report {
    let results = specs
        .iter()
        .map(|&spec| {
            let mut per_query = BTreeMap::new();
            let mut skipped = Vec::new();
            for (qid, ranked) in run {
                match score_query(spec, qid, ranked, qrels, opts) {
                    Some(v) => {
                        per_query.insert(qid.clone(), v);
                    }
                    None => skipped.push(qid.clone()),
                }
            }
            let mean = if per_query.is_empty() {
                None
            } else {
                Some(per_query.values().sum::<f64>() / per_query.len() as f64)
            };
            MetricResult {
                spec,
                per_query,
                mean,
                skipped,
            }
        })
        .collect();
    Report { results }
}

/// `x` as a percentage rounded half-up to two decimals.
pub fn format_percent(x: f64) -> String {
    let hundredths = (x * 10_000.0 + 0.5 + 1e-9).floor();
    format!("{:.2}", hundredths / 100.0)
}

impl Report {
    pub fn get(&self, spec: MetricSpec) -> Option<&MetricResult> {
        self.results.iter().find(|r| r.spec == spec)
    }

    /// `metric\tqid\tvalue` rows then `metric\tall\tmean`, full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            for (qid, v) in &r.per_query {
                out.push_str(&format!("{}\t{qid}\t{v}\n", r.spec));
            }
            if let Some(m) = r.mean {
                out.push_str(&format!("{}\tall\t{m}\n", r.spec));
            }
        }
        out
    }

    /// Human-readable table with percentages.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "metric", "mean(%)", "queries", "skipped");
        for r in &self.results {
            let mean = r.mean.map_or_else(|| "-".to_string(), format_percent);
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8}\n",
                r.spec.to_string(),
                mean,
                r.per_query.len(),
                r.skipped.len()
            ));
        }
        out
    }
}
