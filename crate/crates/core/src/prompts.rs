//! Prompt rendering and response parsing.
//!
//! Four templates ship as text resources and can be replaced at run time:
//!
//! | file      | placeholders                | used by            |
//! |-----------|-----------------------------|--------------------|
//! | `mqr.txt` | `{cnt}` `{query}` `{example}` | query expansion  |
//! | `cqe.txt` | `{questions}`               | pre-answer passage |
//! | `q2d.txt` | `{query}`                   | Query2Doc baseline |
//! | `cot.txt` | `{query}`                   | CoT baseline       |
//!
//! Substitution is single-pass: text coming from a query is never
//! re-expanded even if it contains `{...}`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("expected {expected} numbered expansions, found {found}")]
    BadExpansionCount { expected: usize, found: usize },
    #[error("response contains no passage text")]
    EmptyPassage,
    #[error("cannot read template {path}: {message}")]
    Template { path: String, message: String },
}

const MQR_TEMPLATE: &str = include_str!("../resources/mqr.txt");
const CQE_TEMPLATE: &str = include_str!("../resources/cqe.txt");
const Q2D_TEMPLATE: &str = include_str!("../resources/q2d.txt");
const COT_TEMPLATE: &str = include_str!("../resources/cot.txt");

fn strip_final_newline(s: &str) -> String {
    s.strip_suffix('\n').unwrap_or(s).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub mqr: String,
    pub cqe: String,
    pub q2d: String,
    pub cot: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            mqr: strip_final_newline(MQR_TEMPLATE),
            cqe: strip_final_newline(CQE_TEMPLATE),
            q2d: strip_final_newline(Q2D_TEMPLATE),
            cot: strip_final_newline(COT_TEMPLATE),
        }
    }
}

impl PromptTemplates {
    /// Defaults, with any of `mqr.txt`, `cqe.txt`, `q2d.txt`, `cot.txt`
    /// found in `dir` taking their place.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("mqr.txt", &mut t.mqr),
            ("cqe.txt", &mut t.cqe),
            ("q2d.txt", &mut t.q2d),
            ("cot.txt", &mut t.cot),
        ] {
            let path = dir.join(name);
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Template {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                *slot = strip_final_newline(&body);
            }
        }
        Ok(t)
    }

    pub fn render_mqr(&self, query: &str, cnt: usize) -> String {
        assert!(cnt >= 1, "expansion count must be >= 1");
        let cnt_s = cnt.to_string();
        let example = example_block(cnt);
        substitute(
            &self.mqr,
            &HashMap::from([("cnt", cnt_s.as_str()), ("query", query), ("example", example.as_str())]),
        )
    }

    pub fn render_cqe(&self, original: &str, subs: &[String]) -> String {
        let questions = std::iter::once(original)
            .chain(subs.iter().map(String::as_str))
            .enumerate()
            .map(|(i, q)| format!("Question {}: {q}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n");
        substitute(&self.cqe, &HashMap::from([("questions", questions.as_str())]))
    }

    pub fn render_q2d(&self, query: &str) -> String {
        substitute(&self.q2d, &HashMap::from([("query", query)]))
    }

    pub fn render_cot(&self, query: &str) -> String {
        substitute(&self.cot, &HashMap::from([("query", query)]))
    }
}

/// Numbered placeholder lines, one per requested expansion.
pub fn example_block(cnt: usize) -> String {
    (1..=cnt)
        .map(|i| format!("{i}. <query variant {i}>"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Replaces known `{name}` placeholders in one pass; unknown ones stay.
fn substitute(template: &str, values: &HashMap<&str, &str>) -> String {
    placeholder()
        .replace_all(template, |c: &regex::Captures| {
            values
                .get(&c[1])
                .map_or_else(|| c[0].to_string(), |v| v.to_string())
        })
        .into_owned()
}

pub fn render_mqr(query: &str, cnt: usize) -> String {
    PromptTemplates::default().render_mqr(query, cnt)
}

pub fn render_cqe(original: &str, subs: &[String]) -> String {
    PromptTemplates::default().render_cqe(original, subs)
}

fn numbered() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s*(.+)$").unwrap())
}

/// Numbered items (`1. x` or `1) x`) in order of appearance.
pub fn numbered_items(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| numbered().captures(l))
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Exactly `cnt` sub-queries; extra items are dropped.
pub fn parse_mqr_response(text: &str, cnt: usize) -> Result<Vec<String>, PromptError> {
    let mut items = numbered_items(text);
    if items.len() < cnt {
        return Err(PromptError::BadExpansionCount {
            expected: cnt,
            found: items.len(),
        });
    }
    items.truncate(cnt);
    Ok(items)
}

/// Text after the last `Passage:` marker, or the whole response.
pub fn parse_cqe_response(text: &str) -> Result<String, PromptError> {
    let body = match text.rfind("Passage:") {
        Some(pos) => &text[pos + "Passage:".len()..],
        None => text,
    };
    let body = body.trim();
    if body.is_empty() {
        Err(PromptError::EmptyPassage)
    } else {
        Ok(body.to_string())
    }
}
