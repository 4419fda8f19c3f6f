//! Scripted chat backend.
//!
//! A script maps prompt hashes (see [`super::prompt_hash`]) to one or more
//! responses. The n-th call for a prompt returns the n-th response; once the
//! list is exhausted the last one repeats. An empty scripted response is
//! reported as [`BackendError::EmptyCompletion`].
//!
//! Script files are JSON lines, one entry per prompt:
//!
//! ```text
//! {"prompt_hash": "<sha256 hex>", "responses": ["1. a\n2. b\n3. c"]}
//! {"prompt": "<literal user prompt>", "response": "Passage: ..."}
//! ```
//!
//! A `prompt` entry is hashed as a single user message.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, BackendError, ChatBackend, ChatRequest, ChatResponse, Message};

#[derive(Debug, Default)]
pub struct MockChat {
    script: HashMap<String, Vec<String>>,
    served: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    responses: Vec<String>,
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scripts a response for a single-user-message prompt.
    pub fn script(&mut self, prompt: &str, response: impl Into<String>) -> &mut Self {
        self.script_sequence(prompt, vec![response.into()])
    }

    /// Scripts successive responses for a single-user-message prompt.
    pub fn script_sequence(&mut self, prompt: &str, responses: Vec<String>) -> &mut Self {
        let hash = prompt_hash(&[Message::user(prompt)]);
        self.script_hash(hash, responses)
    }

    pub fn script_hash(&mut self, hash: impl Into<String>, responses: Vec<String>) -> &mut Self {
        assert!(!responses.is_empty(), "a script entry needs at least one response");
        self.script.insert(hash.into(), responses);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut mock = MockChat::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::InvalidRequest(format!("mock script line {}: {e}", i + 1))
            })?;
            let hash = match (entry.prompt_hash, entry.prompt) {
                (Some(h), _) => h,
                (None, Some(p)) => prompt_hash(&[Message::user(p)]),
                (None, None) => {
                    return Err(BackendError::InvalidRequest(format!(
                        "mock script line {}: needs `prompt_hash` or `prompt`",
                        i + 1
                    )))
                }
            };
            let mut responses = entry.responses;
            if let Some(r) = entry.response {
                responses.insert(0, r);
            }
            if responses.is_empty() {
                return Err(BackendError::InvalidRequest(format!(
                    "mock script line {}: no responses",
                    i + 1
                )));
            }
            mock.script.insert(hash, responses);
        }
        Ok(mock)
    }

    /// Writes the script in the file format accepted by [`MockChat::load`],
    /// sorted by hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BackendError> {
        let mut keys: Vec<_> = self.script.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let entry = ScriptEntry {
                prompt_hash: Some(k.clone()),
                prompt: None,
                response: None,
                responses: self.script[k].clone(),
            };
            out.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path.as_ref(), out)?;
        Ok(())
    }

    /// Total `chat` invocations, including ones that errored.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = req.prompt_hash();
        let responses = self
            .script
            .get(&hash)
            .ok_or_else(|| BackendError::NoScript(hash.clone()))?;
        let idx = {
            let mut served = self.served.lock().expect("mock lock poisoned");
            let n = served.entry(hash).or_insert(0);
            let idx = (*n).min(responses.len() - 1);
            *n += 1;
            idx
        };
        let text = responses[idx].clone();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(ChatResponse {
            completion_tokens: super::rough_token_count(&text),
            text,
        })
    }
}

/// Wraps a backend and remembers every successful completion so the
/// session can be replayed with [`MockChat`].
pub struct RecordingChat<C> {
    inner: C,
    log: Mutex<HashMap<String, Vec<String>>>,
}

impl<C: ChatBackend> RecordingChat<C> {
    pub fn new(inner: C) -> Self {
        RecordingChat {
            inner,
            log: Mutex::new(HashMap::new()),
        }
    }

    /// Responses recorded so far, as a script.
    pub fn script(&self) -> MockChat {
        let mut mock = MockChat::new();
        for (hash, responses) in self.log.lock().expect("recorder lock poisoned").iter() {
            mock.script_hash(hash.clone(), responses.clone());
        }
        mock
    }
}

impl<C: ChatBackend> ChatBackend for RecordingChat<C> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.chat(req)?;
        self.log
            .lock()
            .expect("recorder lock poisoned")
            .entry(req.prompt_hash())
            .or_default()
            .push(resp.text.clone());
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Decoding;

    #[test]
    fn scripted_response_and_counter() {
        let mut m = MockChat::new();
        m.script("expand", "1. a\n2. b\n3. c");
        assert_eq!(m.calls(), 0);
        let r = m.chat(&ChatRequest::user("expand", Decoding::default())).unwrap();
        assert_eq!(r.text, "1. a\n2. b\n3. c");
        assert_eq!(r.completion_tokens, 6);
        assert_eq!(m.calls(), 1);
    }

    #[test]
    fn recorded_session_replays() {
        let mut live = MockChat::new();
        live.script("a", "first answer").script("b", "second answer");
        let rec = RecordingChat::new(live);
        let ra = rec.chat(&ChatRequest::user("a", Decoding::default())).unwrap();
        rec.chat(&ChatRequest::user("b", Decoding::default())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        rec.script().save(&path).unwrap();
        let replay = MockChat::load(&path).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay.chat(&ChatRequest::user("a", Decoding::default())).unwrap(), ra);
    }

    #[test]
    fn unscripted_prompt() {
        let m = MockChat::new();
        let err = m.chat(&ChatRequest::user("nope", Decoding::default())).unwrap_err();
        assert!(matches!(err, BackendError::NoScript(_)));
    }

    #[test]
    fn no_caching_of_chat() {
        let mut m = MockChat::new();
        m.script("p", "x");
        let req = ChatRequest::user("p", Decoding::default());
        m.chat(&req).unwrap();
        m.chat(&req).unwrap();
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn sequences_and_empty_completions() {
        let mut m = MockChat::new();
        m.script_sequence("p", vec!["".into(), "second".into()]);
        let req = ChatRequest::user("p", Decoding::default());
        assert!(matches!(m.chat(&req), Err(BackendError::EmptyCompletion)));
        assert_eq!(m.chat(&req).unwrap().text, "second");
        assert_eq!(m.chat(&req).unwrap().text, "second");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MockChat::new();
        m.script("a", "1. x");
        m.script_sequence("b", vec!["one".into(), "two".into()]);
        let p = dir.path().join("script.jsonl");
        m.save(&p).unwrap();
        let loaded = MockChat::load(&p).unwrap();
        assert_eq!(loaded.script, m.script);

        std::fs::write(&p, "{\"prompt\": \"hello\", \"response\": \"world\"}\n").unwrap();
        let loaded = MockChat::load(&p).unwrap();
        let r = loaded.chat(&ChatRequest::user("hello", Decoding::default())).unwrap();
        assert_eq!(r.text, "world");
    }
}
