//! Chat-completion and embedding backends.
//!
//! Every pipeline path runs against one of three backends:
//!
//! * [`http`] talks to OpenAI-compatible `/v1/chat/completions` and
//!   `/v1/embeddings` endpoints.
//! * [`mock::MockChat`] replays scripted responses keyed by prompt hash.
//! * [`offline`] holds the hashed bag-of-words embedder and a deterministic
//!   chat stand-in, so nothing needs network or GPUs.
//!
//! Chat responses are never cached. Embeddings go through
//! [`cache::CachedEmbedder`].

pub mod cache;
pub mod http;
pub mod mock;
pub mod offline;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::CachedEmbedder;
pub use http::{HttpChat, HttpConfig, HttpEmbedder};
pub use mock::{MockChat, RecordingChat};
pub use offline::{offline_embed, OfflineChat, OfflineEmbedder};

/// Decoding defaults used for evaluation runs, thinking mode off.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_P: f64 = 0.8;
pub const DEFAULT_TOP_K: u32 = 20;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("no scripted response for prompt hash {0}")]
    NoScript(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

impl BackendError {
    /// Content-level failures (the model answered, but badly) as opposed to
    /// infrastructure failures. Pipelines degrade on the former and abort on
    /// the latter.
    pub fn is_content_failure(&self) -> bool {
        matches!(self, BackendError::EmptyCompletion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Sampling parameters shared by every chat call of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Forwarded to the server as-is; no local semantics.
    pub thinking: bool,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            top_k: Some(DEFAULT_TOP_K),
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
            thinking: false,
        }
    }
}

impl Decoding {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == Some(0) {
            return Err(BackendError::InvalidRequest("top_k must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(flatten)]
    pub decoding: Decoding,
}

impl ChatRequest {
    /// A single user message with the given decoding parameters.
    pub fn user(prompt: impl Into<String>, decoding: Decoding) -> Self {
        ChatRequest {
            messages: vec![Message::user(prompt)],
            decoding,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("at least one message required".into()));
        }
        self.decoding.validate()
    }

    /// Content hash identifying the prompt, independent of sampling
    /// parameters. Mock scripts are keyed by it.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.messages)
    }
}

/// SHA-256 (hex) of the JSON encoding of the message list.
pub fn prompt_hash(messages: &[Message]) -> String {
    let encoded = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&encoded))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub completion_tokens: u64,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(req)
    }
}

/// A dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::BadResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::BadResponse("non-finite embedding entry".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub trait Embedder: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn identifier(&self) -> String;

    /// One vector per text, same order, all of one dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let mut v = self.embed(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| BackendError::BadResponse("embedder returned no vectors".into()))
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn identifier(&self) -> String {
        (**self).identifier()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn identifier(&self) -> String {
        (**self).identifier()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(texts)
    }
}

pub(crate) fn check_uniform_dim(vectors: &[EmbeddingVector]) -> Result<(), BackendError> {
    if let Some(first) = vectors.first() {
        let expected = first.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != expected) {
            return Err(BackendError::DimensionMismatch {
                expected,
                got: bad.dim(),
            });
        }
    }
    Ok(())
}

/// Whitespace token count, used where a backend reports no usage.
pub(crate) fn rough_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
