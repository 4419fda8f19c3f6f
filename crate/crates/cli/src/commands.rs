use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use moler_core::backends::{BackendError, CachedEmbedder, ChatBackend, Decoding, Embedder, RecordingChat};
use moler_core::corpus::{load_corpus, BeirDataset, CorpusError, Query};
use moler_core::metrics::{evaluate_run, EvalOptions, Gain, MetricSpec};
use moler_core::mol::{load_text_corpora, mol_curve_csv, toy_corpus, train_mol, MolConfig, Objective, Schedule};
use moler_core::pipeline::{read_run, sweep_csv, sweep_expansions, write_run, write_traces};
use moler_core::rl::{curve_csv, moving_average, total_variation, train_toy, Component, GrpoConfig, ToyEnv};
use moler_core::{
    build_index, CorpusIndex, Depth, FusionConfig, HttpChat, HttpConfig, HttpEmbedder, MockChat, OfflineChat,
    OfflineEmbedder, PromptTemplates, Retriever, Strategy, StrategyConfig,
};

use crate::config::{pick, FileConfig};
use crate::{ChatArgs, Cli, Command, DataArgs, EmbedArgs, EvalArgs, IndexArgs, IngestArgs, MolArgs, RlArgs, RunArgs, SweepArgs};

pub const CACHE_DIR_ENV: &str = "MOLER_CACHE_DIR";
const DEFAULT_SPLIT: &str = "test";
const DEFAULT_METRICS: &str = "recall@1k,ndcg@10";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config or missing inputs; exit 2.
    Usage(String),
    /// Failure while doing the work; exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        if e.is_missing_input() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T = ()> = Result<T, CliError>;

pub(crate) fn dispatch(cli: Cli) -> CliResult {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(usage)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(&cfg, a),
        Command::Index(a) => index(&cfg, a),
        Command::Run(a) => run(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::RlTrainToy(a) => rl_train_toy(&cfg, a),
        Command::MolTrainToy(a) => mol_train_toy(&cfg, a),
    }
}

fn data_dir(cfg: &FileConfig, a: &DataArgs) -> CliResult<PathBuf> {
    a.data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| usage("--data is required"))
}

fn split(cfg: &FileConfig, a: &DataArgs) -> String {
    pick(a.split.clone(), cfg.split.clone(), DEFAULT_SPLIT.to_string())
}

fn backend(cfg: &FileConfig, a: &EmbedArgs, default: &str) -> CliResult<String> {
    let b = pick(a.backend.clone(), cfg.backend.clone(), default.to_string());
    match b.as_str() {
        "live" | "mock" | "offline" => Ok(b),
        _ => Err(usage(format!("unknown backend `{b}` (expected live, mock or offline)"))),
    }
}

fn require(v: Option<String>, flag: &str) -> CliResult<String> {
    v.ok_or_else(|| usage(format!("{flag} is required with the live backend")))
}

/// Embedder for `backend`; `dim` applies to the offline embedder.
fn embedder(cfg: &FileConfig, a: &EmbedArgs, backend: &str, dim: usize) -> CliResult<Box<dyn Embedder>> {
    if backend != "live" {
        return OfflineEmbedder::new(dim)
            .map(|e| Box::new(e) as Box<dyn Embedder>)
            .map_err(|e| usage(e.to_string()));
    }
    let model = require(a.embed_model.clone().or_else(|| cfg.embed_model.clone()), "--embed-model")?;
    let http = HttpEmbedder::new(HttpConfig::from_env(model).map_err(|e| usage(e.to_string()))?);
    let cached = CachedEmbedder::new(http);
    let cached = match std::env::var(CACHE_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => cached.with_dir(dir).map_err(|e| CliError::Runtime(e.into()))?,
        _ => cached,
    };
    Ok(Box::new(cached))
}

fn chat_backend(cfg: &FileConfig, a: &ChatArgs, backend: &str) -> CliResult<Box<dyn ChatBackend>> {
    match backend {
        "offline" => Ok(Box::new(OfflineChat::new())),
        "mock" => {
            let path = a
                .mock_script
                .clone()
                .or_else(|| cfg.mock_script.clone())
                .ok_or_else(|| usage("--mock-script is required with the mock backend"))?;
            let mock = MockChat::load(&path).map_err(|e| match e {
                BackendError::Cache(io) => usage(format!("cannot read mock script {}: {io}", path.display())),
                other => usage(other.to_string()),
            })?;
            Ok(Box::new(mock))
        }
        _ => {
            let model = require(a.chat_model.clone().or_else(|| cfg.chat_model.clone()), "--chat-model")?;
            Ok(Box::new(HttpChat::new(HttpConfig::from_env(model).map_err(|e| usage(e.to_string()))?)))
        }
    }
}

fn decoding(cfg: &FileConfig, a: &ChatArgs) -> Decoding {
    let d = Decoding::default();
    Decoding {
        temperature: pick(a.temperature, cfg.temperature, d.temperature),
        top_p: pick(a.top_p, cfg.top_p, d.top_p),
        top_k: a.top_k.or(cfg.top_k).or(d.top_k),
        max_tokens: pick(a.max_tokens, cfg.max_tokens, d.max_tokens),
        seed: None,
        thinking: pick(a.thinking, cfg.thinking, d.thinking),
    }
}

fn templates(cfg: &FileConfig, a: &ChatArgs) -> CliResult<PromptTemplates> {
    match a.templates.clone().or_else(|| cfg.templates.clone()) {
        Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| usage(e.to_string())),
        None => Ok(PromptTemplates::default()),
    }
}

fn depth(flag: Option<String>, cfg: &FileConfig) -> CliResult<Depth> {
    pick(flag, cfg.pool_depth.clone(), "all".into())
        .parse()
        .map_err(usage)
}

fn metrics(flag: Option<String>, cfg: &FileConfig) -> CliResult<Vec<MetricSpec>> {
    let s = pick(flag, cfg.metric.clone(), DEFAULT_METRICS.into());
    let specs = MetricSpec::parse_list(&s).map_err(usage)?;
    if specs.is_empty() {
        return Err(usage("at least one metric is required"));
    }
    Ok(specs)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Manifest describing a validated dataset, keys in sorted order.
pub fn manifest_json(ds: &BeirDataset) -> String {
    let v = json!({
        "split": ds.split,
        "docs": ds.corpus.len(),
        "queries": ds.queries.len(),
        "judged_queries": ds.qrels.num_queries(),
        "judgments": ds.qrels.num_pairs(),
    });
    serde_json::to_string_pretty(&v).expect("manifest serializes") + "\n"
}

fn ingest(cfg: &FileConfig, a: IngestArgs) -> CliResult {
    let dir = data_dir(cfg, &a.data)?;
    let ds = BeirDataset::load(&dir, &split(cfg, &a.data))?;
    let out = a.out.unwrap_or_else(|| dir.join("manifest.json"));
    write_file(&out, manifest_json(&ds))?;
    println!("docs={} queries={}", ds.corpus.len(), ds.queries.len());
    Ok(())
}

fn index(cfg: &FileConfig, a: IndexArgs) -> CliResult {
    let dir = data_dir(cfg, &a.data)?;
    let docs = load_corpus(BeirDataset::corpus_path(&dir))?;
    let b = backend(cfg, &a.embed, "offline")?;
    let dim = pick(a.embed.dim, cfg.dim, moler_core::backends::offline::DEFAULT_OFFLINE_DIM);
    let emb = embedder(cfg, &a.embed, &b, dim)?;
    let idx = build_index(&docs, emb.as_ref()).context("building index")?;
    let out = a.out.unwrap_or_else(|| dir.join("index"));
    idx.save(&out).with_context(|| format!("saving index to {}", out.display()))?;
    println!("docs={} dim={} embedder={}", idx.len(), idx.dim(), idx.embedder());
    Ok(())
}

struct RetrievalSetup {
    ds: BeirDataset,
    idx: CorpusIndex,
    embedder: Box<dyn Embedder>,
    chat: Box<dyn ChatBackend>,
    templates: PromptTemplates,
    decoding: Decoding,
}

fn retrieval_setup(
    cfg: &FileConfig,
    data: &DataArgs,
    embed: &EmbedArgs,
    chat: &ChatArgs,
    index: Option<PathBuf>,
) -> CliResult<RetrievalSetup> {
    let dir = data_dir(cfg, data)?;
    let ds = BeirDataset::load(&dir, &split(cfg, data))?;
    let index_dir = index.or_else(|| cfg.index.clone()).unwrap_or_else(|| dir.join("index"));
    if !index_dir.join("index.json").exists() {
        return Err(usage(format!(
            "no index at {} (build one with `moler index`)",
            index_dir.display()
        )));
    }
    let idx = CorpusIndex::load(&index_dir).context("loading index")?;
    let b = backend(cfg, embed, "offline")?;
    let embedder = embedder(cfg, embed, &b, idx.dim())?;
    if embedder.identifier() != idx.embedder() {
        return Err(usage(format!(
            "index was built with `{}` but this run embeds with `{}`",
            idx.embedder(),
            embedder.identifier()
        )));
    }
    Ok(RetrievalSetup {
        ds,
        idx,
        embedder,
        chat: chat_backend(cfg, chat, &b)?,
        templates: templates(cfg, chat)?,
        decoding: decoding(cfg, chat),
    })
}

fn selected_queries(ds: &BeirDataset, all: bool) -> Vec<Query> {
    if all {
        ds.queries.clone()
    } else {
        ds.judged_queries().into_iter().cloned().collect()
    }
}

fn record_target(a: &ChatArgs, backend: &str) -> CliResult<Option<PathBuf>> {
    match (&a.record_script, backend) {
        (Some(_), "live") => Ok(a.record_script.clone()),
        (Some(_), _) => Err(usage("--record-script only applies to the live backend")),
        (None, _) => Ok(None),
    }
}

fn run(cfg: &FileConfig, a: RunArgs) -> CliResult {
    let setup = retrieval_setup(cfg, &a.data, &a.embed, &a.chat, a.index.clone())?;
    let strategy = match a.strategy {
        Some(s) => s,
        None => cfg
            .strategy
            .as_deref()
            .ok_or_else(|| usage("--strategy is required"))?
            .parse::<Strategy>()
            .map_err(usage)?,
    };
    let sc = StrategyConfig {
        strategy,
        n: pick(a.n, cfg.n, moler_core::pipeline::DEFAULT_EXPANSIONS),
        fusion: FusionConfig::new(pick(a.rrf_k, cfg.rrf_k, moler_core::fusion::DEFAULT_RRF_K))
            .map_err(|e| usage(e.to_string()))?,
        pool_depth: depth(a.pool_depth.clone(), cfg)?,
        decoding: setup.decoding.clone(),
        seed: pick(a.seed, cfg.seed, 0),
    };
    sc.validate().map_err(|e| usage(e.to_string()))?;
    let parallel = pick(a.parallel, cfg.parallel, 1);
    let backend_name = backend(cfg, &a.embed, "offline")?;
    let record = record_target(&a.chat, &backend_name)?;

    let queries = selected_queries(&setup.ds, a.all_queries);
    let recorder = record.as_ref().map(|_| RecordingChat::new(setup.chat.as_ref()));
    let chat: &dyn ChatBackend = match &recorder {
        Some(r) => r,
        None => setup.chat.as_ref(),
    };
    let retriever = Retriever::new(&setup.idx, setup.embedder.as_ref(), chat, &setup.templates);
    let results = retriever
        .run_queries(&queries, &sc, parallel)
        .with_context(|| format!("running {strategy}"))?;

    let (lists, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut buf = Vec::new();
    write_run(&mut buf, &lists, strategy.name()).context("formatting run")?;
    write_file(&a.out, buf)?;
    let trace_path = a.trace.unwrap_or_else(|| a.out.with_extension("trace.jsonl"));
    let mut tbuf = Vec::new();
    write_traces(&mut tbuf, &traces).context("formatting traces")?;
    write_file(&trace_path, tbuf)?;
    if let (Some(r), Some(path)) = (&recorder, &record) {
        r.script().save(path).map_err(|e| CliError::Runtime(e.into()))?;
    }

    let calls: usize = traces.iter().map(|t| t.chat_calls).sum();
    let degraded = traces.iter().filter(|t| !t.is_clean()).count();
    println!(
        "strategy={strategy} queries={} chat_calls={calls} degraded={degraded} run={}",
        traces.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(cfg: &FileConfig, a: EvalArgs) -> CliResult {
    let dir = data_dir(cfg, &a.data)?;
    let qrels_path = BeirDataset::qrels_path(&dir, &split(cfg, &a.data));
    let qrels = moler_core::corpus::load_qrels(&qrels_path)?;
    let file = fs::File::open(&a.run).map_err(|e| usage(format!("cannot open run {}: {e}", a.run.display())))?;
    let run = read_run(std::io::BufReader::new(file)).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let specs = metrics(a.metric.clone(), cfg)?;
    let gain: Gain = pick(a.gain.clone(), cfg.gain.clone(), "linear".into()).parse().map_err(usage)?;
    let opts = EvalOptions {
        relevance_threshold: pick(a.relevance_threshold, cfg.relevance_threshold, 1),
        gain,
    };
    let report = evaluate_run(&run, &qrels, &specs, &opts);
    print!("{}", report.to_table());
    let tsv = a.tsv.unwrap_or_else(|| a.run.with_extension("eval.tsv"));
    write_file(&tsv, report.to_tsv())?;
    Ok(())
}

fn sweep(cfg: &FileConfig, a: SweepArgs) -> CliResult {
    let setup = retrieval_setup(cfg, &a.data, &a.embed, &a.chat, a.index.clone())?;
    let strategies: Vec<Strategy> = a
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(usage)?;
    let n_values = a
        .n_values
        .clone()
        .or_else(|| cfg.n_values.clone())
        .unwrap_or_else(|| vec![1, 2, 3, 5, 8]);
    if n_values.contains(&0) {
        return Err(usage("expansion counts must be positive"));
    }
    let specs = metrics(a.metric.clone(), cfg)?;
    let queries = setup.ds.judged_queries().into_iter().cloned().collect::<Vec<_>>();
    let retriever = Retriever::new(&setup.idx, setup.embedder.as_ref(), setup.chat.as_ref(), &setup.templates);
    let parallel = pick(a.parallel, cfg.parallel, 1);
    let mut rows = Vec::new();
    for strategy in strategies {
        let base = StrategyConfig {
            strategy,
            n: 1,
            fusion: FusionConfig::new(pick(a.rrf_k, cfg.rrf_k, moler_core::fusion::DEFAULT_RRF_K))
                .map_err(|e| usage(e.to_string()))?,
            pool_depth: depth(a.pool_depth.clone(), cfg)?,
            decoding: setup.decoding.clone(),
            seed: pick(a.seed, cfg.seed, 0),
        };
        let opts = EvalOptions {
            relevance_threshold: pick(None, cfg.relevance_threshold, 1),
            gain: Gain::Linear,
        };
        rows.extend(
            sweep_expansions(&retriever, &queries, &setup.ds.qrels, &base, &n_values, &specs, &opts, parallel)
                .with_context(|| format!("sweeping {strategy}"))?,
        );
    }
    let csv = sweep_csv(&rows);
    write_file(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn rl_train_toy(cfg: &FileConfig, a: RlArgs) -> CliResult {
    let gc = GrpoConfig {
        variant: a.variant,
        beta: a.beta,
        learning_rate: a.lr,
        group_size: a.group_size,
        seed: pick(a.seed, cfg.seed, 0),
        ..GrpoConfig::default()
    };
    gc.validate().map_err(|e| usage(e.to_string()))?;
    let (env, good) = ToyEnv::retrieval().context("building toy environment")?;
    let out = train_toy(&env, &gc, a.steps).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(&a.out, curve_csv(&out.curve))?;
    let rewards: Vec<f64> = out.curve.iter().map(|p| p.mean_reward).collect();
    let smoothed = moving_average(&rewards, 8).last().copied().unwrap_or(0.0);
    let cqe = Component::Cqe.index();
    println!(
        "variant={} steps={} final_reward_ma8={smoothed} greedy_passage={} good_passage={good} p_good={} tv_to_reference={}",
        gc.variant,
        a.steps,
        out.policy.greedy(cqe),
        out.policy.probs(cqe)[good],
        total_variation(&out.policy, &out.reference)
    );
    Ok(())
}

fn mol_train_toy(cfg: &FileConfig, a: MolArgs) -> CliResult {
    let (batch, vocab) = match (&a.domain, &a.general) {
        (Some(d), Some(g)) => {
            let (batch, vocab) = load_text_corpora(d, g).map_err(|e| usage(e.to_string()))?;
            let vpath = a.vocab_out.clone().unwrap_or_else(|| a.out.with_extension("vocab.txt"));
            vocab
                .save(&vpath)
                .with_context(|| format!("writing {}", vpath.display()))?;
            let n = vocab.len();
            (batch, n)
        }
        _ => toy_corpus(),
    };
    let mc = MolConfig {
        objective: if a.objective == "ce-only" { Objective::CeOnly } else { Objective::Mixed },
        schedule: if a.schedule == "alternate" { Schedule::Alternate } else { Schedule::Joint },
        learning_rate: a.lr,
        steps: a.steps,
        seed: pick(a.seed, cfg.seed, 0),
        ..MolConfig::default()
    };
    if !(mc.learning_rate > 0.0 && mc.learning_rate.is_finite()) {
        return Err(usage("--lr must be positive"));
    }
    let out = train_mol(&batch, vocab, &mc).map_err(|e| CliError::Runtime(e.into()))?;
    write_file(&a.out, mol_curve_csv(&out.curve))?;
    if let Some(last) = out.curve.last() {
        println!(
            "objective={} steps={} ce_domain={} kl_general={}",
            a.objective, a.steps, last.ce_domain, last.kl_general
        );
    }
    Ok(())
}
