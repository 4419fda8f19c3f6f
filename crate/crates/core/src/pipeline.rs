//! End-to-end retrieval strategies.
//!
//! | strategy | chat calls | probes fused                              |
//! |----------|-----------:|-------------------------------------------|
//! | raw      | 0          | query                                     |
//! | q2d      | 1          | query + passage (one concatenated probe)  |
//! | cot      | 1          | query + rationale (one concatenated probe)|
//! | lc_mqr   | 1          | query, each of n sub-queries              |
//! | mslf     | 2          | query, one passage answering all sub-queries |
//! | mmlf     | n + 1      | query, one passage per sub-query          |
//!
//! Counts are for clean runs. Empty or unparseable completions are retried
//! once (the retry is counted), then the strategy degrades toward a weaker
//! one and the trace records what happened. Transport and configuration
//! errors abort.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatRequest, Decoding, Embedder};
use crate::corpus::{Query, RelevanceJudgments};
use crate::fusion::{rrf_fuse, FusionConfig, FusionError};
use crate::index::{CorpusIndex, Depth, IndexError, RankedList, ScoredDoc};
use crate::metrics::{score_query, EvalOptions, MetricSpec};
use crate::prompts::{numbered_items, parse_cqe_response, parse_mqr_response, PromptError, PromptTemplates};

/// Expansion count used for training rollouts and evaluation.
pub const DEFAULT_EXPANSIONS: usize = 3;
/// Ranked-list prefix kept in traces.
pub const TRACE_PREFIX: usize = 10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Raw,
    Q2d,
    Cot,
    LcMqr,
    Mslf,
    Mmlf,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Raw,
        Strategy::Q2d,
        Strategy::Cot,
        Strategy::LcMqr,
        Strategy::Mslf,
        Strategy::Mmlf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Raw => "raw",
            Strategy::Q2d => "q2d",
            Strategy::Cot => "cot",
            Strategy::LcMqr => "lc_mqr",
            Strategy::Mslf => "mslf",
            Strategy::Mmlf => "mmlf",
        }
    }

    /// Chat calls a clean run makes with `n` expansions.
    pub fn expected_chat_calls(self, n: usize) -> usize {
        match self {
            Strategy::Raw => 0,
            Strategy::Q2d | Strategy::Cot | Strategy::LcMqr => 1,
            Strategy::Mslf => 2,
            Strategy::Mmlf => n + 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected one of raw, q2d, cot, lc_mqr, mslf, mmlf)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Number of sub-queries; ignored by raw, q2d and cot.
    pub n: usize,
    pub fusion: FusionConfig,
    pub pool_depth: Depth,
    pub decoding: Decoding,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            n: DEFAULT_EXPANSIONS,
            fusion: FusionConfig::default(),
            pool_depth: Depth::All,
            decoding: Decoding::default(),
            seed: 0,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n == 0 {
            return Err(PipelineError::Config("expansion count n must be >= 1".into()));
        }
        FusionConfig::new(self.fusion.k)?;
        self.decoding.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListPrefix {
    pub label: String,
    pub top: Vec<String>,
}

/// What one query's strategy execution did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub query_id: String,
    pub strategy: Strategy,
    pub sub_queries: Vec<String>,
    pub passages: Vec<String>,
    pub chat_calls: usize,
    pub completion_tokens_total: u64,
    pub lists: Vec<ListPrefix>,
    /// Fallbacks taken, in order. Empty for a clean run.
    pub degraded: Vec<String>,
}

impl RunTrace {
    fn new(query_id: &str, strategy: Strategy) -> Self {
        RunTrace {
            query_id: query_id.to_string(),
            strategy,
            sub_queries: Vec::new(),
            passages: Vec::new(),
            chat_calls: 0,
            completion_tokens_total: 0,
            lists: Vec::new(),
            degraded: Vec::new(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.degraded.is_empty()
    }
}

enum Asked<T> {
    Got(T),
    /// Both attempts failed on content; carries the last raw completion.
    Failed { last_text: Option<String>, reason: String },
}

/// Everything a strategy needs besides the query.
pub struct Retriever<'a> {
    pub index: &'a CorpusIndex,
    pub embedder: &'a dyn Embedder,
    pub chat: &'a dyn ChatBackend,
    pub templates: &'a PromptTemplates,
}

struct Session<'r, 'a> {
    r: &'r Retriever<'a>,
    cfg: &'r StrategyConfig,
    trace: RunTrace,
}

impl Session<'_, '_> {
    fn request(&self, prompt: String) -> ChatRequest {
        let mut decoding = self.cfg.decoding.clone();
        decoding.seed = Some(decoding.seed.unwrap_or(self.cfg.seed));
        ChatRequest::user(prompt, decoding)
    }

    fn ask<T>(
        &mut self,
        prompt: String,
        parse: impl Fn(&str) -> Result<T, PromptError>,
    ) -> Result<Asked<T>, PipelineError> {
        let req = self.request(prompt);
        let mut last_text = None;
        let mut reason = String::new();
        for _ in 0..2 {
            self.trace.chat_calls += 1;
            match self.r.chat.chat(&req) {
                Ok(resp) => {
                    self.trace.completion_tokens_total += resp.completion_tokens;
                    match parse(&resp.text) {
                        Ok(v) => return Ok(Asked::Got(v)),
                        Err(e) => {
                            reason = e.to_string();
                            last_text = Some(resp.text);
                        }
                    }
                }
                Err(e) if e.is_content_failure() => {
                    reason = e.to_string();
                    last_text = None;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Asked::Failed { last_text, reason })
    }

    /// Sub-queries for the MQR step. `None` means the model gave nothing
    /// usable twice; a short list is padded with the original query.
    fn expand(&mut self, query: &Query) -> Result<Option<Vec<String>>, PipelineError> {
        let n = self.cfg.n;
        let prompt = self.r.templates.render_mqr(&query.text, n);
        match self.ask(prompt, |t| parse_mqr_response(t, n))? {
            Asked::Got(subs) => Ok(Some(subs)),
            Asked::Failed {
                last_text: Some(text),
                reason,
            } => {
                let mut subs = numbered_items(&text);
                subs.truncate(n);
                let padded = n - subs.len();
                subs.resize(n, query.text.clone());
                self.trace
                    .degraded
                    .push(format!("mqr: {reason}; padded {padded} with original query"));
                Ok(Some(subs))
            }
            Asked::Failed { last_text: None, reason } => {
                self.trace.degraded.push(format!("mqr: {reason}"));
                Ok(None)
            }
        }
    }

    fn passage(&mut self, prompt: String, what: &str) -> Result<Option<String>, PipelineError> {
        match self.ask(prompt, parse_cqe_response)? {
            Asked::Got(p) => Ok(Some(p)),
            Asked::Failed { reason, .. } => {
                self.trace.degraded.push(format!("{what}: {reason}"));
                Ok(None)
            }
        }
    }

    fn rank_text(&mut self, text: &str, label: &str) -> Result<RankedList, PipelineError> {
        let probe = self.r.embedder.embed_one(text)?;
        let list = self.r.index.rank(&probe, self.cfg.pool_depth, label)?;
        self.record(&list);
        Ok(list)
    }

    fn rank_texts(&mut self, texts: &[String], label_prefix: &str, first: usize) -> Result<Vec<RankedList>, PipelineError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let probes = self.r.embedder.embed(texts)?;
        let mut out = Vec::with_capacity(probes.len());
        for (i, p) in probes.iter().enumerate() {
            let list = self
                .r
                .index
                .rank(p, self.cfg.pool_depth, &format!("{label_prefix}{}", first + i))?;
            self.record(&list);
            out.push(list);
        }
        Ok(out)
    }

    fn record(&mut self, list: &RankedList) {
        self.trace.lists.push(ListPrefix {
            label: list.label().to_string(),
            top: list.top_ids(TRACE_PREFIX),
        });
    }

    fn fuse(&self, lists: &[RankedList], qid: &str) -> Result<RankedList, PipelineError> {
        Ok(rrf_fuse(lists, &self.cfg.fusion)?
            .with_label(qid)
            .truncated(self.cfg.pool_depth))
    }

    fn finish(self, list: RankedList) -> (RankedList, RunTrace) {
        (list, self.trace)
    }
}

impl<'a> Retriever<'a> {
    pub fn new(
        index: &'a CorpusIndex,
        embedder: &'a dyn Embedder,
        chat: &'a dyn ChatBackend,
        templates: &'a PromptTemplates,
    ) -> Self {
        Retriever {
            index,
            embedder,
            chat,
            templates,
        }
    }

    fn session<'r>(&'r self, query: &Query, cfg: &'r StrategyConfig, strategy: Strategy) -> Session<'r, 'a> {
        Session {
            r: self,
            cfg,
            trace: RunTrace::new(&query.id, strategy),
        }
    }

    /// Runs `cfg.strategy` for one query.
    pub fn run(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        cfg.validate()?;
        match cfg.strategy {
            Strategy::Raw => self.run_raw(query, cfg),
            Strategy::Q2d => self.run_q2d(query, cfg),
            Strategy::Cot => self.run_cot(query, cfg),
            Strategy::LcMqr => self.run_lc_mqr(query, cfg),
            Strategy::Mslf => self.run_mslf(query, cfg),
            Strategy::Mmlf => self.run_mmlf(query, cfg),
        }
    }

    pub fn run_raw(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        let mut s = self.session(query, cfg, Strategy::Raw);
        let list = s.rank_text(&query.text, "L0")?.with_label(&query.id);
        Ok(s.finish(list))
    }

    fn run_single_probe(
        &self,
        query: &Query,
        cfg: &StrategyConfig,
        strategy: Strategy,
        prompt: String,
    ) -> Result<(RankedList, RunTrace), PipelineError> {
        let mut s = self.session(query, cfg, strategy);
        let list = match s.passage(prompt, strategy.name())? {
            Some(p) => {
                let probe = format!("{}\n{}", query.text, p);
                s.trace.passages.push(p);
                s.rank_text(&probe, "L0")?
            }
            None => {
                s.trace.degraded.push("fell back to raw query".into());
                s.rank_text(&query.text, "L0")?
            }
        };
        Ok(s.finish(list.with_label(&query.id)))
    }

    pub fn run_q2d(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        self.run_single_probe(query, cfg, Strategy::Q2d, self.templates.render_q2d(&query.text))
    }

    pub fn run_cot(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        self.run_single_probe(query, cfg, Strategy::Cot, self.templates.render_cot(&query.text))
    }

    pub fn run_lc_mqr(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        let mut s = self.session(query, cfg, Strategy::LcMqr);
        let l0 = s.rank_text(&query.text, "L0")?;
        let Some(subs) = s.expand(query)? else {
            s.trace.degraded.push("fell back to raw query".into());
            return Ok(s.finish(l0.with_label(&query.id)));
        };
        s.trace.sub_queries = subs.clone();
        let mut lists = vec![l0];
        lists.extend(s.rank_texts(&subs, "L", 1)?);
        let fused = s.fuse(&lists, &query.id)?;
        Ok(s.finish(fused))
    }

    pub fn run_mslf(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        let mut s = self.session(query, cfg, Strategy::Mslf);
        let l0 = s.rank_text(&query.text, "L0")?;
        let Some(subs) = s.expand(query)? else {
            s.trace.degraded.push("fell back to raw query".into());
            return Ok(s.finish(l0.with_label(&query.id)));
        };
        s.trace.sub_queries = subs.clone();
        let prompt = self.templates.render_cqe(&query.text, &subs);
        let mut lists = vec![l0];
        match s.passage(prompt, "cqe")? {
            Some(p) => {
                lists.push(s.rank_text(&p, "L1")?);
                s.trace.passages.push(p);
            }
            None => {
                s.trace.degraded.push("fell back to sub-query fusion".into());
                lists.extend(s.rank_texts(&subs, "L", 1)?);
            }
        }
        let fused = s.fuse(&lists, &query.id)?;
        Ok(s.finish(fused))
    }

    pub fn run_mmlf(&self, query: &Query, cfg: &StrategyConfig) -> Result<(RankedList, RunTrace), PipelineError> {
        let mut s = self.session(query, cfg, Strategy::Mmlf);
        let l0 = s.rank_text(&query.text, "L0")?;
        let Some(subs) = s.expand(query)? else {
            s.trace.degraded.push("fell back to raw query".into());
            return Ok(s.finish(l0.with_label(&query.id)));
        };
        s.trace.sub_queries = subs.clone();
        let mut lists = vec![l0];
        for (i, sub) in subs.iter().enumerate() {
            let prompt = self.templates.render_cqe(sub, &[]);
            match s.passage(prompt, &format!("cqe[{}]", i + 1))? {
                Some(p) => {
                    lists.push(s.rank_text(&p, &format!("L{}", i + 1))?);
                    s.trace.passages.push(p);
                }
                None => s.trace.degraded.push(format!("dropped list L{}", i + 1)),
            }
        }
        let fused = s.fuse(&lists, &query.id)?;
        Ok(s.finish(fused))
    }

    /// Runs every query, at most `parallelism` at a time. Output order
    /// follows `queries`.
    pub fn run_queries(
        &self,
        queries: &[Query],
        cfg: &StrategyConfig,
        parallelism: usize,
    ) -> Result<Vec<(RankedList, RunTrace)>, PipelineError> {
        cfg.validate()?;
        if parallelism <= 1 {
            return queries.iter().map(|q| self.run(q, cfg)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        pool.install(|| queries.par_iter().map(|q| self.run(q, cfg)).collect())
    }
}

/// Writes `qid Q0 docid rank score tag` lines. Scores use the shortest
/// representation that parses back to the same `f64`.
pub fn write_run<W: Write>(mut w: W, lists: &[RankedList], tag: &str) -> io::Result<()> {
    for list in lists {
        for (i, e) in list.entries().iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {} {tag}", list.label(), e.doc_id, i + 1, e.score)?;
        }
    }
    Ok(())
}

/// Reads a run file into rankings keyed by query id. Lines are ordered by
/// their rank column.
pub fn read_run<R: BufRead>(r: R) -> Result<std::collections::BTreeMap<String, RankedList>, String> {
    let mut rows: std::collections::BTreeMap<String, Vec<(usize, ScoredDoc)>> = Default::default();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("run line {}: expected 6 fields, found {}", i + 1, f.len()));
        }
        let rank: usize = f[3].parse().map_err(|_| format!("run line {}: bad rank `{}`", i + 1, f[3]))?;
        let score: f64 = f[4].parse().map_err(|_| format!("run line {}: bad score `{}`", i + 1, f[4]))?;
        rows.entry(f[0].to_string()).or_default().push((
            rank,
            ScoredDoc {
                doc_id: f[2].to_string(),
                score,
            },
        ));
    }
    rows.into_iter()
        .map(|(qid, mut v)| {
            v.sort_by_key(|(rank, _)| *rank);
            let entries = v.into_iter().map(|(_, e)| e).collect();
            RankedList::from_sorted(qid.clone(), entries)
                .map(|l| (qid.clone(), l))
                .map_err(|e| format!("run for query `{qid}`: {e}"))
        })
        .collect()
}

/// One trace per line as JSON.
pub fn write_traces<W: Write>(mut w: W, traces: &[RunTrace]) -> io::Result<()> {
    for t in traces {
        writeln!(w, "{}", serde_json::to_string(t).expect("trace serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub n: usize,
    /// Mean per metric over non-skipped queries.
    pub means: Vec<(MetricSpec, Option<f64>)>,
    pub chat_calls: usize,
}

/// Mean metrics for each expansion count in `n_values`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_expansions(
    retriever: &Retriever<'_>,
    queries: &[Query],
    qrels: &RelevanceJudgments,
    base: &StrategyConfig,
    n_values: &[usize],
    metrics: &[MetricSpec],
    opts: &EvalOptions,
    parallelism: usize,
) -> Result<Vec<SweepRow>, PipelineError> {
    n_values
        .iter()
        .map(|&n| {
            let cfg = base.clone().with_n(n);
            let results = retriever.run_queries(queries, &cfg, parallelism)?;
            let chat_calls = results.iter().map(|(_, t)| t.chat_calls).sum();
            let means = metrics
                .iter()
                .map(|&spec| {
                    let vals: Vec<f64> = results
                        .iter()
                        .filter_map(|(list, _)| score_query(spec, list.label(), list, qrels, opts))
                        .collect();
                    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    (spec, mean)
                })
                .collect();
            Ok(SweepRow {
                strategy: cfg.strategy,
                n,
                means,
                chat_calls,
            })
        })
        .collect()
}

/// `strategy,n,<metric>...,chat_calls` with full-precision values; an empty
/// cell means every query was skipped.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        let names: Vec<String> = first.means.iter().map(|(s, _)| s.to_string()).collect();
        out.push_str(&format!("strategy,n,{},chat_calls\n", names.join(",")));
    }
    for r in rows {
        let vals: Vec<String> = r
            .means
            .iter()
            .map(|(_, v)| v.map(|x| x.to_string()).unwrap_or_default())
            .collect();
        out.push_str(&format!("{},{},{},{}\n", r.strategy, r.n, vals.join(","), r.chat_calls));
    }
    out
}
