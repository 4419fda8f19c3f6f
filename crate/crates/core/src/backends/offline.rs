//! Network-free stand-ins: a hashed bag-of-words embedder and a
//! deterministic chat generator.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use std::sync::OnceLock;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Embedder, EmbeddingVector};

pub const MIN_OFFLINE_DIM: usize = 8;
pub const DEFAULT_OFFLINE_DIM: usize = 256;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket a token lands in for a given dimension.
pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

/// Hashed bag-of-words embedding, L2-normalized. Text without tokens maps to
/// the unit vector on bucket 0.
///
/// Panics if `dim < 8`.
pub fn offline_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= MIN_OFFLINE_DIM, "offline embedder needs dim >= {MIN_OFFLINE_DIM}");
    let mut v = vec![0.0f64; dim];
    for tok in tokenize(text) {
        v[token_bucket(&tok, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector(v)
}

#[derive(Debug)]
pub struct OfflineEmbedder {
    dim: usize,
    calls: AtomicUsize,
}

impl OfflineEmbedder {
    pub fn new(dim: usize) -> Result<Self, BackendError> {
        if dim < MIN_OFFLINE_DIM {
            return Err(BackendError::InvalidRequest(format!(
                "offline embedder needs dim >= {MIN_OFFLINE_DIM}, got {dim}"
            )));
        }
        Ok(OfflineEmbedder {
            dim,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of `embed` batches served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for OfflineEmbedder {
    fn default() -> Self {
        OfflineEmbedder::new(DEFAULT_OFFLINE_DIM).expect("default dim is valid")
    }
}

impl Embedder for OfflineEmbedder {
    fn identifier(&self) -> String {
        format!("offline-bow-fnv1a-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| offline_embed(t, self.dim)).collect())
    }
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s*\S").unwrap())
}

fn question_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:Original question|Question \d+|Query)\s*:\s*(.+?)\s*$").unwrap()
    })
}

/// Deterministic chat stand-in for offline runs.
///
/// It reads the questions out of the prompt (`Original question:`,
/// `Question N:` or `Query:` lines). If the prompt carries a numbered
/// example block it answers with that many numbered reformulations (seeded
/// shuffles of the question tokens); otherwise it answers with a
/// `Passage:` that restates the questions. Output depends only on the prompt
/// and the request seed.
#[derive(Debug, Default)]
pub struct OfflineChat {
    calls: AtomicUsize,
}

impl OfflineChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(prompt: &str, seed: u64) -> String {
        let questions: Vec<&str> = prompt
            .lines()
            .filter_map(|l| question_line().captures(l))
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        let expansions = prompt.lines().filter(|l| numbered_line().is_match(l)).count();
        let base = questions.first().copied().unwrap_or("").to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(prompt.as_bytes()));

        if expansions > 0 {
            let tokens: Vec<&str> = base.split_whitespace().collect();
            (1..=expansions)
                .map(|i| {
                    let mut t = tokens.clone();
                    t.shuffle(&mut rng);
                    format!("{i}. {}", t.join(" "))
                })
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            format!("Passage: {}", questions.join(" "))
        }
    }
}

impl ChatBackend for OfflineChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = req
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let text = Self::respond(&prompt, req.decoding.seed.unwrap_or(0));
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(ChatResponse {
            completion_tokens: super::rough_token_count(&text),
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Decoding;

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum::<f64>() / (a.norm() * b.norm())
    }

    #[test]
    fn empty_text_is_e0() {
        let v = offline_embed("", 16);
        assert_eq!(v.values()[0], 1.0);
        assert!(v.values()[1..].iter().all(|&x| x == 0.0));
        let v = offline_embed("  ,;  ", 16);
        assert_eq!(v.values()[0], 1.0);
    }

    #[test]
    fn unit_norm() {
        let v = offline_embed("a", 256);
        assert!((v.norm() - 1.0).abs() < 1e-9);
        let v = offline_embed("The quick brown fox, jumps over the lazy dog!", 256);
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scale_invariance_and_bag_equality() {
        assert_eq!(offline_embed("dog dog", 64), offline_embed("dog", 64));
        let a = offline_embed("heart disease diet", 256);
        let b = offline_embed("diet for heart disease", 256);
        // "for" adds one token, so compare against the same multiset
        let c = offline_embed("Diet heart DISEASE", 256);
        assert!((cos(&a, &c) - 1.0).abs() < 1e-12);
        assert!(cos(&a, &b) < 1.0);
    }

    #[test]
    fn deterministic() {
        assert_eq!(offline_embed("same text", 32), offline_embed("same text", 32));
        let e = OfflineEmbedder::new(32).unwrap();
        let v = e.embed(&["x".into(), "x".into()]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn dim_floor() {
        assert!(OfflineEmbedder::new(7).is_err());
        assert!(OfflineEmbedder::new(8).is_ok());
    }

    #[test]
    fn offline_chat_answers_both_prompt_kinds() {
        let chat = OfflineChat::new();
        let mqr = "Original question: heart diet\n\nFormat:\n\n1. <query variant 1>\n2. <query variant 2>";
        let r = chat.chat(&ChatRequest::user(mqr, Decoding::default())).unwrap();
        assert_eq!(r.text.lines().count(), 2);
        assert!(r.text.starts_with("1. "));

        let cqe = "Please write a passage.\n\nQuestion 1: A b\n\nQuestion 2: C\n\nPassage:";
        let r = chat.chat(&ChatRequest::user(cqe, Decoding::default())).unwrap();
        assert_eq!(r.text, "Passage: A b C");
        assert_eq!(chat.calls(), 2);
    }
}
