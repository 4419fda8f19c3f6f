//! Reciprocal rank fusion.
//!
//! `score(d) = Σ_k 1 / (rank_k(d) + K)` over the lists that contain `d`,
//! with 1-based ranks. A list that does not contain `d` contributes nothing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{ranking_order, RankedList, ScoredDoc};

pub const DEFAULT_RRF_K: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("nothing to fuse")]
    NoLists,
    #[error("RRF constant must be positive and finite, got {0}")]
    BadConstant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { k: DEFAULT_RRF_K }
    }
}

impl FusionConfig {
    pub fn new(k: f64) -> Result<Self, FusionError> {
        if k > 0.0 && k.is_finite() {
            Ok(FusionConfig { k })
        } else {
            Err(FusionError::BadConstant(k))
        }
    }
}

/// Fuses `lists` into one ranking labeled like the first list.
///
/// Each document's contributions are summed from its best rank to its worst,
/// so the result does not depend on the order of `lists`.
pub fn rrf_fuse(lists: &[RankedList], cfg: &FusionConfig) -> Result<RankedList, FusionError> {
    let first = lists.first().ok_or(FusionError::NoLists)?;
    if !(cfg.k > 0.0 && cfg.k.is_finite()) {
        return Err(FusionError::BadConstant(cfg.k));
    }

    let mut ranks: HashMap<&str, Vec<usize>> = HashMap::new();
    for list in lists {
        for (i, doc) in list.doc_ids().enumerate() {
            ranks.entry(doc).or_default().push(i + 1);
        }
    }

    let mut entries: Vec<ScoredDoc> = ranks
        .into_iter()
        .map(|(doc, mut rs)| {
            rs.sort_unstable();
            let score = rs.iter().map(|&r| 1.0 / (r as f64 + cfg.k)).sum();
            ScoredDoc {
                doc_id: doc.to_string(),
                score,
            }
        })
        .collect();
    entries.sort_by(ranking_order);

    Ok(RankedList::from_sorted(first.label().to_string(), entries)
        .expect("fused entries are unique and sorted"))
}
