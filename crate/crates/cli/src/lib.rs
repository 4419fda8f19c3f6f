//! `moler` command-line tool.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors (including missing input files).

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{manifest_json, CliError};

#[derive(Debug, Parser)]
#[command(name = "moler", version, about = "Query expansion and rank fusion for dense retrieval")]
pub struct Cli {
    /// TOML file with default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a BEIR directory and write its manifest.
    Ingest(IngestArgs),
    /// Embed the corpus and save a dense index.
    Index(IndexArgs),
    /// Run one retrieval strategy over the queries and write a TREC run.
    Run(RunArgs),
    /// Score a run file against the relevance judgments.
    Eval(EvalArgs),
    /// Evaluate strategies across expansion counts.
    Sweep(SweepArgs),
    /// Train the toy expansion policy with GRPO or Dr.GRPO.
    RlTrainToy(RlArgs),
    /// Train the toy bigram model with the mixed CE/KL objective.
    MolTrainToy(MolArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// BEIR directory with corpus.jsonl, queries.jsonl and qrels/<split>.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Qrels split name.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    /// Where chat and embedding calls go.
    #[arg(long, value_parser = ["live", "mock", "offline"])]
    pub backend: Option<String>,
    /// Offline embedding dimension (index only).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Embedding model name for the live backend.
    #[arg(long)]
    pub embed_model: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ChatArgs {
    /// Chat model name for the live backend.
    #[arg(long)]
    pub chat_model: Option<String>,
    /// Prompt-hash script for the mock backend.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Save live completions as a mock script.
    #[arg(long)]
    pub record_script: Option<PathBuf>,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<u32>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Ask the server to enable its thinking mode.
    #[arg(long)]
    pub thinking: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Manifest path; defaults to <data>/manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub embed: EmbedArgs,
    /// Index directory; defaults to <data>/index.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[command(flatten)]
    pub chat: ChatArgs,
    /// Index directory; defaults to <data>/index.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// raw, q2d, cot, lc_mqr, mslf or mmlf.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<moler_core::Strategy>,
    /// Number of sub-queries.
    #[arg(long)]
    pub n: Option<usize>,
    /// RRF constant.
    #[arg(long)]
    pub rrf_k: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Documents kept per ranking: `all` or a count.
    #[arg(long)]
    pub pool_depth: Option<String>,
    /// Queries processed concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Run every query, not only judged ones.
    #[arg(long)]
    pub all_queries: bool,
    /// Run file path.
    #[arg(long, default_value = "run.trec")]
    pub out: PathBuf,
    /// Trace path; defaults to the run path with `.trace.jsonl`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TREC run file.
    #[arg(long)]
    pub run: PathBuf,
    /// Comma-separated metrics such as recall@1k,ndcg@10.
    #[arg(long)]
    pub metric: Option<String>,
    /// linear or exp.
    #[arg(long)]
    pub gain: Option<String>,
    /// Minimum grade counted as relevant.
    #[arg(long)]
    pub relevance_threshold: Option<u32>,
    /// Per-query TSV path; defaults to the run path with `.eval.tsv`.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[command(flatten)]
    pub chat: ChatArgs,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Comma-separated strategies.
    #[arg(long, default_value = "lc_mqr,mslf,mmlf")]
    pub strategies: String,
    /// Comma-separated expansion counts.
    #[arg(long, value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub rrf_k: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pool_depth: Option<String>,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RlArgs {
    /// grpo or drgrpo.
    #[arg(long, default_value = "drgrpo", value_parser = parse_variant)]
    pub variant: moler_core::rl::Variant,
    /// KL coefficient.
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = moler_core::rl::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value_t = moler_core::rl::TOY_LEARNING_RATE)]
    pub lr: f64,
    /// Curve CSV path.
    #[arg(long, default_value = "rl_curve.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MolArgs {
    /// mixed or ce-only.
    #[arg(long, default_value = "mixed", value_parser = ["mixed", "ce-only"])]
    pub objective: String,
    /// joint or alternate.
    #[arg(long, default_value = "joint", value_parser = ["joint", "alternate"])]
    pub schedule: String,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Domain corpus, one whitespace-tokenized sequence per line.
    #[arg(long, requires = "general")]
    pub domain: Option<PathBuf>,
    /// General corpus, same format and line count as the domain corpus.
    #[arg(long, requires = "domain")]
    pub general: Option<PathBuf>,
    /// Curve CSV path.
    #[arg(long, default_value = "mol_curve.csv")]
    pub out: PathBuf,
    /// Vocabulary file written when text corpora are given.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<moler_core::Strategy, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<moler_core::rl::Variant, String> {
    s.parse()
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
