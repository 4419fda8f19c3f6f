use serde::{Deserialize, Serialize};

use crate::backends::Embedder;
use crate::corpus::{Query, RelevanceJudgments, DEFAULT_RELEVANCE_THRESHOLD};
use crate::fusion::{rrf_fuse, FusionConfig};
use crate::index::{CorpusIndex, Depth, RankedList};
use crate::metrics::recall_at_k;
use crate::pipeline::PipelineError;

/// Recall of the fused (query, passage) ranking at depth `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub k: usize,
    pub relevance_threshold: u32,
    pub fusion: FusionConfig,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            k: 1000,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            fusion: FusionConfig::default(),
        }
    }
}

/// Reward from already-ranked query and passage lists. A query with no
/// relevant documents scores 0.
pub fn reward_from_lists(
    query_id: &str,
    l_query: &RankedList,
    l_passage: &RankedList,
    qrels: &RelevanceJudgments,
    spec: &RewardSpec,
) -> f64 {
    let fused = rrf_fuse(&[l_query.clone(), l_passage.clone()], &spec.fusion).expect("two lists");
    let relevant = qrels.relevant_set(query_id, spec.relevance_threshold);
    recall_at_k(&fused, &relevant, spec.k).unwrap_or(0.0)
}

/// Embeds the query and the rollout's passage, ranks both against `idx`
/// and scores the fused list.
pub fn compute_reward(
    query: &Query,
    passage: &str,
    qrels: &RelevanceJudgments,
    idx: &CorpusIndex,
    embedder: &dyn Embedder,
    spec: &RewardSpec,
) -> Result<f64, PipelineError> {
    let probes = embedder.embed(&[query.text.clone(), passage.to_string()])?;
    let l_query = idx.rank(&probes[0], Depth::All, &query.id)?;
    let l_passage = idx.rank(&probes[1], Depth::All, &query.id)?;
    Ok(reward_from_lists(&query.id, &l_query, &l_passage, qrels, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::OfflineEmbedder;
    use crate::corpus::Document;
    use crate::index::build_index;

    fn fixture() -> (CorpusIndex, OfflineEmbedder, RelevanceJudgments, Vec<Document>) {
        let e = OfflineEmbedder::new(256).unwrap();
        let docs: Vec<Document> = [
            ("d0", "solar panel efficiency"),
            ("d1", "river delta sediment"),
            ("d2", "mitochondria membrane potential"),
        ]
        .iter()
        .map(|(id, t)| Document {
            id: id.to_string(),
            title: String::new(),
            text: t.to_string(),
        })
        .collect();
        let idx = build_index(&docs, &e).unwrap();
        let mut qrels = RelevanceJudgments::new();
        qrels.insert("q", "d2", 1);
        (idx, e, qrels, docs)
    }

    #[test]
    fn passage_equal_to_relevant_doc_scores_one() {
        let (idx, e, qrels, docs) = fixture();
        let q = Query {
            id: "q".into(),
            text: "membrane voltage".into(),
        };
        let spec = RewardSpec {
            k: 1,
            ..RewardSpec::default()
        };
        let r = compute_reward(&q, &docs[2].retrieval_text(), &qrels, &idx, &e, &spec).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn orthogonal_passage_and_missing_query_score_zero() {
        let (idx, e, qrels, _) = fixture();
        let q = Query {
            id: "q".into(),
            text: "solar panel efficiency".into(),
        };
        let spec = RewardSpec {
            k: 1,
            ..RewardSpec::default()
        };
        let r = compute_reward(&q, "quasar", &qrels, &idx, &e, &spec).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn unjudged_query_scores_zero() {
        let (idx, e, qrels, _) = fixture();
        let q = Query {
            id: "other".into(),
            text: "river".into(),
        };
        let r = compute_reward(&q, "delta", &qrels, &idx, &e, &RewardSpec::default()).unwrap();
        assert_eq!(r, 0.0);
    }
}
