//! Group-relative policy optimization over a toy categorical policy.
//!
//! Two variants share one surrogate:
//!
//! ```text
//! J = 1/G Σ_i Σ_c w_ic Σ_t [ exp(logp_new - logp_old) · A_i - β · KL(π_θ ‖ π_ref) ]
//! ```
//!
//! `grpo` uses `w_ic = 1/|o_ic|` and std-normalized advantages; `drgrpo`
//! uses `w_ic = 1` and mean-centered advantages. No ratio clipping is applied.

mod reward;
mod toy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reward::{compute_reward, reward_from_lists, RewardSpec};
pub use toy::{curve_csv, moving_average, total_variation, train_toy, CurvePoint, ToyEnv, ToyPolicy, TrainOutcome};

/// Floor applied to the group standard deviation.
pub const DEFAULT_STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_GROUP_SIZE: usize = 8;
/// Sampling temperature for live rollouts.
pub const DEFAULT_ROLLOUT_TEMPERATURE: f64 = 0.9;
pub const DEFAULT_MAX_COMPLETION_TOKENS: usize = 8192;
/// Learning rate used for LLM-scale fine-tuning; the toy trainer uses its own.
pub const LLM_LEARNING_RATE: f64 = 1e-4;
/// Step size that trains the toy policy in a few hundred steps.
pub const TOY_LEARNING_RATE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("advantage estimation needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("advantages were computed for {got}, objective expects {expected}")]
    VariantMismatch { expected: Variant, got: Variant },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed rollout: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Grpo,
    DrGrpo,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Grpo => "grpo",
            Variant::DrGrpo => "drgrpo",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['.', '-', '_'], "").as_str() {
            "grpo" => Ok(Variant::Grpo),
            "drgrpo" => Ok(Variant::DrGrpo),
            _ => Err(format!("unknown variant `{s}` (expected grpo or drgrpo)")),
        }
    }
}

/// Per-rollout advantages, tagged with the variant that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    variant: Variant,
    values: Vec<f64>,
}

impl Advantages {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Overrides the values; used to probe the objective directly.
    pub fn from_values(variant: Variant, values: Vec<f64>) -> Self {
        Advantages { variant, values }
    }
}

fn check_rewards(rewards: &[f64]) -> Result<(), RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(RlError::NonFinite("rewards".into()));
    }
    Ok(())
}

/// Arithmetic mean; exact when every value is equal, so a zero-variance
/// group yields exactly zero deviations.
fn mean(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return xs[0];
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(R_i - mean) / max(std, floor)` with the population std; all zeros when
/// the std is exactly zero.
pub fn grpo_advantages(rewards: &[f64], std_floor: f64) -> Result<Advantages, RlError> {
    check_rewards(rewards)?;
    let m = mean(rewards);
    let var = rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rewards.len() as f64;
    let std = var.sqrt();
    let values = if std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        let d = std.max(std_floor);
        rewards.iter().map(|r| (r - m) / d).collect()
    };
    Ok(Advantages {
        variant: Variant::Grpo,
        values,
    })
}

/// `R_i - mean(R)`.
pub fn drgrpo_advantages(rewards: &[f64]) -> Result<Advantages, RlError> {
    check_rewards(rewards)?;
    let m = mean(rewards);
    Ok(Advantages {
        variant: Variant::DrGrpo,
        values: rewards.iter().map(|r| r - m).collect(),
    })
}

pub fn advantages(variant: Variant, rewards: &[f64], std_floor: f64) -> Result<Advantages, RlError> {
    match variant {
        Variant::Grpo => grpo_advantages(rewards, std_floor),
        Variant::DrGrpo => drgrpo_advantages(rewards),
    }
}

/// Pipeline stages the policy acts in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Mqr,
    Cqe,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Mqr, Component::Cqe];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Tokens one component emitted, with their log-probabilities under the
/// sampling policy and the reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentOutput {
    pub tokens: Vec<usize>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutput {
    /// Indexed by component.
    pub components: Vec<ComponentOutput>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query_id: String,
    pub outputs: Vec<RolloutOutput>,
}

impl Group {
    pub fn rewards(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.reward).collect()
    }

    fn validate(&self, policy: &ToyPolicy) -> Result<(), RlError> {
        for (i, o) in self.outputs.iter().enumerate() {
            if o.components.len() != policy.num_components() {
                return Err(RlError::Malformed(format!(
                    "rollout {i} has {} components, policy has {}",
                    o.components.len(),
                    policy.num_components()
                )));
            }
            for (c, co) in o.components.iter().enumerate() {
                let n = co.tokens.len();
                if n == 0 {
                    return Err(RlError::Malformed(format!("rollout {i} component {c} is empty")));
                }
                if co.logprobs_old.len() != n || co.logprobs_ref.len() != n {
                    return Err(RlError::Malformed(format!(
                        "rollout {i} component {c}: {n} tokens but {} old / {} ref logprobs",
                        co.logprobs_old.len(),
                        co.logprobs_ref.len()
                    )));
                }
                if let Some(&t) = co.tokens.iter().find(|&&t| t >= policy.num_actions(c)) {
                    return Err(RlError::Malformed(format!("rollout {i} component {c}: token {t} out of range")));
                }
                if co.logprobs_old.iter().chain(&co.logprobs_ref).any(|x| !x.is_finite()) {
                    return Err(RlError::NonFinite(format!("logprobs of rollout {i} component {c}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub variant: Variant,
    pub beta: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub group_size: usize,
    pub seed: u64,
    /// Recorded for live rollouts; the toy policy samples at temperature 1.
    pub temperature: f64,
    pub max_completion_tokens: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            variant: Variant::DrGrpo,
            beta: 0.0,
            learning_rate: TOY_LEARNING_RATE,
            std_floor: DEFAULT_STD_FLOOR,
            group_size: DEFAULT_GROUP_SIZE,
            seed: 0,
            temperature: DEFAULT_ROLLOUT_TEMPERATURE,
            max_completion_tokens: DEFAULT_MAX_COMPLETION_TOKENS,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(RlError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RlError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.std_floor.is_nan() || self.std_floor < 0.0 {
            return Err(RlError::Config("std floor must be >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(RlError::GroupTooSmall(self.group_size));
        }
        Ok(())
    }
}

/// Objective value, its gradient w.r.t. each component's logits (ascent
/// direction), and each rollout's per-component term before the `1/G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    pub grad: Vec<Vec<f64>>,
    pub contributions: Vec<Vec<f64>>,
}

/// Evaluates the surrogate at `policy` for a group sampled from the old
/// policy, with `reference` as the KL anchor.
pub fn surrogate_objective(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    group: &Group,
    adv: &Advantages,
    variant: Variant,
    beta: f64,
) -> Result<Surrogate, RlError> {
    if adv.variant != variant {
        return Err(RlError::VariantMismatch {
            expected: variant,
            got: adv.variant,
        });
    }
    if adv.values.len() != group.outputs.len() {
        return Err(RlError::Malformed(format!(
            "{} advantages for {} rollouts",
            adv.values.len(),
            group.outputs.len()
        )));
    }
    if adv.values.iter().any(|a| !a.is_finite()) {
        return Err(RlError::NonFinite("advantages".into()));
    }
    if !policy.same_shape(reference) {
        return Err(RlError::Malformed("policy and reference differ in shape".into()));
    }
    group.validate(policy)?;

    let nc = policy.num_components();
    let logp: Vec<Vec<f64>> = (0..nc).map(|c| policy.log_probs(c)).collect();
    let probs: Vec<Vec<f64>> = logp.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect();
    let ref_logp: Vec<Vec<f64>> = (0..nc).map(|c| reference.log_probs(c)).collect();
    let kl: Vec<f64> = (0..nc)
        .map(|c| {
            probs[c]
                .iter()
                .zip(&logp[c])
                .zip(&ref_logp[c])
                .map(|((p, lp), lr)| if *p == 0.0 { 0.0 } else { p * (lp - lr) })
                .sum()
        })
        .collect();
    // d KL / d z_j = p_j (log p_j - log r_j - KL)
    let kl_grad: Vec<Vec<f64>> = (0..nc)
        .map(|c| {
            (0..probs[c].len())
                .map(|j| probs[c][j] * (logp[c][j] - ref_logp[c][j] - kl[c]))
                .collect()
        })
        .collect();

    let g = group.outputs.len() as f64;
    let mut grad: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut contributions = Vec::with_capacity(group.outputs.len());
    let mut objective = 0.0;
    for (out, &a) in group.outputs.iter().zip(&adv.values) {
        let mut row = Vec::with_capacity(nc);
        for (c, co) in out.components.iter().enumerate() {
            let w = match variant {
                Variant::Grpo => 1.0 / co.tokens.len() as f64,
                Variant::DrGrpo => 1.0,
            };
            let mut terms = Vec::with_capacity(co.tokens.len());
            for (&tok, &old) in co.tokens.iter().zip(&co.logprobs_old) {
                let ratio = (logp[c][tok] - old).exp();
                terms.push(ratio * a - beta * kl[c]);
                for j in 0..grad[c].len() {
                    let dlogp = if j == tok { 1.0 } else { 0.0 } - probs[c][j];
                    grad[c][j] += w * (a * ratio * dlogp - beta * kl_grad[c][j]) / g;
                }
            }
            let term = w * pairwise_sum(&terms);
            row.push(term);
            objective += term;
        }
        contributions.push(row);
    }
    if !objective.is_finite() {
        return Err(RlError::NonFinite("objective".into()));
    }
    Ok(Surrogate {
        objective: objective / g,
        grad,
        contributions,
    })
}

/// Pairwise summation; repeated equal terms sum exactly at power-of-two
/// lengths.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
