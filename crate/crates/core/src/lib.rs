//! Dense retrieval with LLM query expansion and reciprocal rank fusion,
//! plus the training objectives used to tune the expansion model.
//!
//! - [`corpus`] loads BEIR-style datasets.
//! - [`backends`] talks to chat and embedding services, with offline and
//!   scripted stand-ins.
//! - [`index`] ranks documents by cosine similarity.
//! - [`fusion`] merges rankings with RRF.
//! - [`metrics`] scores rankings against relevance judgments.
//! - [`prompts`] renders and parses the expansion prompts.
//! - [`pipeline`] runs retrieval strategies end to end.
//! - [`rl`] holds the GRPO and Dr.GRPO objectives and a toy trainer.
//! - [`mol`] holds the mixed CE/KL continual-pretraining objective.

pub mod backends;
pub mod corpus;
pub mod fusion;
pub mod index;
pub mod metrics;
pub mod mol;
pub mod pipeline;
pub mod prompts;
pub mod rl;

pub use backends::{
    BackendError, CachedEmbedder, ChatBackend, ChatRequest, ChatResponse, Decoding, Embedder, EmbeddingVector,
    HttpChat, HttpConfig, HttpEmbedder, Message, MockChat, OfflineChat, OfflineEmbedder,
};
pub use corpus::{BeirDataset, CorpusError, Document, Query, RelevanceJudgments};
pub use fusion::{rrf_fuse, FusionConfig, FusionError};
pub use index::{build_index, cosine, rank_all, CorpusIndex, Depth, IndexError, RankedList, ScoredDoc};
pub use metrics::{evaluate_run, ndcg_at_k, recall_at_k, EvalOptions, Gain, MetricSpec, Report};
pub use pipeline::{PipelineError, Retriever, RunTrace, Strategy, StrategyConfig};
pub use prompts::PromptTemplates;
