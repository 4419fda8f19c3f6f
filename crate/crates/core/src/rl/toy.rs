//! A categorical stand-in for the LLM policy and a small retrieval
//! environment it can be trained on.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{advantages, surrogate_objective, ComponentOutput, GrpoConfig, Group, RlError, RolloutOutput};
use crate::backends::{rough_token_count, OfflineEmbedder};
use crate::corpus::{Document, Query, RelevanceJudgments};
use crate::index::build_index;
use crate::pipeline::PipelineError;

use super::reward::{compute_reward, RewardSpec};

/// One logit vector per component; each rollout component emits a single
/// action drawn from its softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn uniform(num_actions: &[usize]) -> Self {
        ToyPolicy {
            logits: num_actions.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self, RlError> {
        if logits.is_empty() || logits.iter().any(Vec::is_empty) {
            return Err(RlError::Malformed("every component needs at least one action".into()));
        }
        if logits.iter().flatten().any(|x| !x.is_finite()) {
            return Err(RlError::NonFinite("policy logits".into()));
        }
        Ok(ToyPolicy { logits })
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn num_components(&self) -> usize {
        self.logits.len()
    }

    pub fn num_actions(&self, c: usize) -> usize {
        self.logits[c].len()
    }

    pub fn same_shape(&self, other: &ToyPolicy) -> bool {
        self.logits.len() == other.logits.len()
            && self.logits.iter().zip(&other.logits).all(|(a, b)| a.len() == b.len())
    }

    pub fn log_probs(&self, c: usize) -> Vec<f64> {
        let z = &self.logits[c];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    pub fn probs(&self, c: usize) -> Vec<f64> {
        self.log_probs(c).into_iter().map(f64::exp).collect()
    }

    /// Most likely action; ties go to the lowest index.
    pub fn greedy(&self, c: usize) -> usize {
        let z = &self.logits[c];
        (0..z.len()).fold(0, |best, j| if z[j] > z[best] { j } else { best })
    }

    pub fn sample<R: Rng>(&self, c: usize, rng: &mut R) -> usize {
        WeightedIndex::new(self.probs(c))
            .expect("softmax weights are positive")
            .sample(rng)
    }

    /// Moves the logits by `lr * grad`.
    pub fn ascend(&mut self, grad: &[Vec<f64>], lr: f64) {
        for (row, g) in self.logits.iter_mut().zip(grad) {
            for (z, d) in row.iter_mut().zip(g) {
                *z += lr * d;
            }
        }
    }
}

/// Largest per-component total-variation distance between two policies.
pub fn total_variation(a: &ToyPolicy, b: &ToyPolicy) -> f64 {
    (0..a.num_components())
        .map(|c| {
            0.5 * a
                .probs(c)
                .iter()
                .zip(b.probs(c))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Candidate actions per component with a fixed reward for every joint
/// choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub num_actions: Vec<usize>,
    /// Row-major over components, last component fastest.
    pub rewards: Vec<f64>,
    /// Text tokens each action stands for, reported as completion length.
    pub completion_tokens: Vec<Vec<usize>>,
}

impl ToyEnv {
    pub fn from_table(
        num_actions: Vec<usize>,
        rewards: Vec<f64>,
        completion_tokens: Vec<Vec<usize>>,
    ) -> Result<Self, RlError> {
        let cells: usize = num_actions.iter().product();
        if num_actions.is_empty() || cells == 0 || rewards.len() != cells {
            return Err(RlError::Malformed(format!(
                "reward table has {} cells, action counts need {cells}",
                rewards.len()
            )));
        }
        if completion_tokens.len() != num_actions.len()
            || completion_tokens.iter().zip(&num_actions).any(|(t, &n)| t.len() != n)
        {
            return Err(RlError::Malformed("completion lengths do not match action counts".into()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(RlError::NonFinite("reward table".into()));
        }
        Ok(ToyEnv {
            num_actions,
            rewards,
            completion_tokens,
        })
    }

    /// Every joint action earns `reward`.
    pub fn constant(num_actions: &[usize], reward: f64) -> Self {
        let cells = num_actions.iter().product();
        ToyEnv {
            num_actions: num_actions.to_vec(),
            rewards: vec![reward; cells],
            completion_tokens: num_actions.iter().map(|&n| vec![1; n]).collect(),
        }
    }

    pub fn reward(&self, actions: &[usize]) -> f64 {
        let idx = actions
            .iter()
            .zip(&self.num_actions)
            .fold(0, |acc, (&a, &n)| acc * n + a);
        self.rewards[idx]
    }

    /// Retrieval environment with exactly one rewarded passage.
    ///
    /// The query shares one token with each of three distractor documents
    /// and none with the relevant one, so the raw ranking puts the relevant
    /// document fourth. Candidate passages are the relevant document's text
    /// and the three distractors' texts; recall@1 of the fused ranking is 1
    /// only for the first. Sub-query candidates do not change the reward.
    pub fn retrieval() -> Result<(Self, usize), PipelineError> {
        let doc = |id: String, text: String| Document {
            id,
            title: String::new(),
            text,
        };
        let relevant = "kinase phosphorylation cascade signaling".to_string();
        let distractors = [
            "insulin pancreas glucose".to_string(),
            "resistance bacteria antibiotic".to_string(),
            "tumor growth factor".to_string(),
        ];
        let mut docs = vec![doc("d00".into(), relevant.clone())];
        for i in 1..=16 {
            docs.push(doc(format!("d{i:02}"), format!("filler{i}a filler{i}b filler{i}c")));
        }
        for (i, t) in distractors.iter().enumerate() {
            docs.push(doc(format!("d{}", 17 + i), t.clone()));
        }
        let embedder = OfflineEmbedder::new(1024).expect("dim >= 8");
        let idx = build_index(&docs, &embedder)?;
        let query = Query {
            id: "q".into(),
            text: "insulin antibiotic tumor".into(),
        };
        let mut qrels = RelevanceJudgments::new();
        qrels.insert("q", "d00", 1);
        let spec = RewardSpec {
            k: 1,
            ..RewardSpec::default()
        };

        let good = 2;
        let mut passages = distractors.to_vec();
        passages.insert(good, relevant);
        let sub_queries = [
            "insulin signaling; antibiotic resistance; tumor growth",
            "pancreas glucose; bacteria; growth factor",
            "diabetes; infection; cancer",
        ];
        let mut per_passage = Vec::with_capacity(passages.len());
        for p in &passages {
            per_passage.push(compute_reward(&query, p, &qrels, &idx, &embedder, &spec)?);
        }
        let rewards = sub_queries.iter().flat_map(|_| per_passage.iter().copied()).collect();
        let env = ToyEnv::from_table(
            vec![sub_queries.len(), passages.len()],
            rewards,
            vec![
                sub_queries.iter().map(|s| rough_token_count(s) as usize).collect(),
                passages.iter().map(|s| rough_token_count(s) as usize).collect(),
            ],
        )
        .expect("consistent shapes");
        Ok((env, good))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_completion_tokens: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
}

fn sample_group<R: Rng>(env: &ToyEnv, old: &ToyPolicy, reference: &ToyPolicy, g: usize, rng: &mut R) -> (Group, f64) {
    let ref_logp: Vec<Vec<f64>> = (0..old.num_components()).map(|c| reference.log_probs(c)).collect();
    let old_logp: Vec<Vec<f64>> = (0..old.num_components()).map(|c| old.log_probs(c)).collect();
    let mut tokens = 0usize;
    let outputs = (0..g)
        .map(|_| {
            let actions: Vec<usize> = (0..old.num_components()).map(|c| old.sample(c, rng)).collect();
            let components = actions
                .iter()
                .enumerate()
                .map(|(c, &a)| {
                    tokens += env.completion_tokens[c][a];
                    ComponentOutput {
                        tokens: vec![a],
                        logprobs_old: vec![old_logp[c][a]],
                        logprobs_ref: vec![ref_logp[c][a]],
                    }
                })
                .collect();
            RolloutOutput {
                components,
                reward: env.reward(&actions),
            }
        })
        .collect();
    (
        Group {
            query_id: "toy".into(),
            outputs,
        },
        tokens as f64 / g as f64,
    )
}

/// Trains a uniform policy on `env`. The sampling policy is refreshed every
/// step and the initial policy is the KL reference.
pub fn train_toy(env: &ToyEnv, cfg: &GrpoConfig, steps: usize) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    let reference = ToyPolicy::uniform(&env.num_actions);
    let mut policy = reference.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        let old = policy.clone();
        let (group, mean_tokens) = sample_group(env, &old, &reference, cfg.group_size, &mut rng);
        let rewards = group.rewards();
        let adv = advantages(cfg.variant, &rewards, cfg.std_floor)?;
        let s = surrogate_objective(&policy, &reference, &group, &adv, cfg.variant, cfg.beta)?;
        policy.ascend(&s.grad, cfg.learning_rate);
        curve.push(CurvePoint {
            step,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            mean_completion_tokens: mean_tokens,
        });
    }
    Ok(TrainOutcome {
        curve,
        policy,
        reference,
    })
}

/// Trailing moving average; the first points average what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// `step,mean_reward,mean_completion_tokens`
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,mean_reward,mean_completion_tokens\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.mean_reward, p.mean_completion_tokens));
    }
    out
}
