//! OpenAI-compatible HTTP backends.

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    check_uniform_dim, BackendError, ChatBackend, ChatRequest, ChatResponse, Embedder,
    EmbeddingVector,
};

pub const ENV_API_BASE: &str = "MOLER_API_BASE";
pub const ENV_API_KEY: &str = "MOLER_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// e.g. `http://localhost:8000`; `/v1/...` is appended.
    pub api_base: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Pause before the single retry after a transport failure.
    pub retry_backoff: Duration,
}

impl HttpConfig {
    pub fn new(api_base: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            api_base: api_base.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(300),
            retry_backoff: Duration::from_secs(1),
        }
    }

    /// Reads `MOLER_API_BASE` (required) and `MOLER_API_KEY` (optional).
    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| {
            BackendError::InvalidRequest(format!("{ENV_API_BASE} is not set"))
        })?;
        let mut cfg = HttpConfig::new(base, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.api_base.trim_end_matches('/'))
    }
}

struct Transport {
    agent: ureq::Agent,
    cfg: HttpConfig,
}

impl Transport {
    fn new(cfg: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Transport { agent, cfg }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))
    }

    /// One retry on transport failure; status errors are returned as-is.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.cfg.url(path);
        match self.post_once(&url, body) {
            Err(BackendError::Transport(_)) => {
                std::thread::sleep(self.cfg.retry_backoff);
                self.post_once(&url, body)
            }
            other => other,
        }
    }
}

/// Request body for `/v1/chat/completions`.
pub fn chat_body(model: &str, req: &ChatRequest) -> Value {
    let d = &req.decoding;
    let mut body = json!({
        "model": model,
        "messages": req.messages,
        "temperature": d.temperature,
        "top_p": d.top_p,
        "max_tokens": d.max_tokens,
        "chat_template_kwargs": { "enable_thinking": d.thinking },
    });
    if let Some(k) = d.top_k {
        body["top_k"] = json!(k);
    }
    if let Some(s) = d.seed {
        body["seed"] = json!(s);
    }
    body
}

/// Extracts `choices[0].message.content` and `usage.completion_tokens`.
pub fn parse_chat_response(v: &Value) -> Result<ChatResponse, BackendError> {
    let text = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?;
    let text = match text {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => {
            return Err(BackendError::BadResponse(format!(
                "content is not a string: {other}"
            )))
        }
    };
    if text.trim().is_empty() {
        return Err(BackendError::EmptyCompletion);
    }
    let completion_tokens = v
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or_else(|| super::rough_token_count(&text));
    Ok(ChatResponse {
        text,
        completion_tokens,
    })
}

pub fn embeddings_body(model: &str, texts: &[String]) -> Value {
    json!({ "model": model, "input": texts })
}

/// Reads `data[i].embedding`, ordered by `data[i].index` when present.
pub fn parse_embeddings_response(v: &Value, expected: usize) -> Result<Vec<EmbeddingVector>, BackendError> {
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::BadResponse("missing data array".into()))?;
    if data.len() != expected {
        return Err(BackendError::BadResponse(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut rows: Vec<(usize, EmbeddingVector)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::BadResponse(format!("data[{pos}].embedding missing")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| BackendError::BadResponse("non-numeric embedding entry".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((index, EmbeddingVector::new(values)?));
    }
    rows.sort_by_key(|(i, _)| *i);
    let out: Vec<EmbeddingVector> = rows.into_iter().map(|(_, v)| v).collect();
    check_uniform_dim(&out)?;
    Ok(out)
}

pub struct HttpChat {
    transport: Transport,
}

impl HttpChat {
    pub fn new(cfg: HttpConfig) -> Self {
        HttpChat {
            transport: Transport::new(cfg),
        }
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let body = chat_body(&self.transport.cfg.model, req);
        let v = self.transport.post("chat/completions", &body)?;
        parse_chat_response(&v)
    }
}

pub struct HttpEmbedder {
    transport: Transport,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpConfig) -> Self {
        HttpEmbedder {
            transport: Transport::new(cfg),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn identifier(&self) -> String {
        format!("http:{}", self.transport.cfg.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = embeddings_body(&self.transport.cfg.model, texts);
        let v = self.transport.post("embeddings", &body)?;
        parse_embeddings_response(&v, texts.len())
    }
}
