//! Mixed-loss continual pretraining on a bigram softmax model.
//!
//! Domain sequences contribute next-token cross-entropy; general sequences
//! contribute the full-vocabulary KL from the trained model to a frozen
//! reference at every visited context. Both losses average over the scored
//! positions of a sequence (length minus one).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MolError {
    #[error("sequence needs at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("model shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch needs equal domain and general counts, got {domain} and {general}")]
    Unbalanced { domain: usize, general: usize },
    #[error("vocabulary size must be positive")]
    EmptyVocab,
    #[error("{0}")]
    Corpus(String),
}

/// `V x V` logit table; row `a` is the next-token distribution after `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLM {
    vocab: usize,
    logits: Vec<f64>,
}

impl ToyLM {
    pub fn uniform(vocab: usize) -> Result<Self, MolError> {
        if vocab == 0 {
            return Err(MolError::EmptyVocab);
        }
        Ok(ToyLM {
            vocab,
            logits: vec![0.0; vocab * vocab],
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: usize, scale: f64, seed: u64) -> Result<Self, MolError> {
        let mut m = ToyLM::uniform(vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in &mut m.logits {
            *z = rng.random_range(-scale..=scale);
        }
        Ok(m)
    }

    pub fn from_logits(vocab: usize, logits: Vec<f64>) -> Result<Self, MolError> {
        if vocab == 0 {
            return Err(MolError::EmptyVocab);
        }
        if logits.len() != vocab * vocab {
            return Err(MolError::ShapeMismatch(vocab * vocab, logits.len()));
        }
        Ok(ToyLM { vocab, logits })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        &self.logits[ctx * self.vocab..(ctx + 1) * self.vocab]
    }

    pub fn log_probs(&self, ctx: usize) -> Vec<f64> {
        let z = self.row(ctx);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    pub fn probs(&self, ctx: usize) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    fn check(&self, s: &[usize]) -> Result<(), MolError> {
        if s.len() < 2 {
            return Err(MolError::TooShort(s.len()));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= self.vocab) {
            return Err(MolError::TokenOutOfRange { token: t, vocab: self.vocab });
        }
        Ok(())
    }

    fn check_shape(&self, other: &ToyLM) -> Result<(), MolError> {
        if self.vocab != other.vocab {
            return Err(MolError::ShapeMismatch(self.vocab, other.vocab));
        }
        Ok(())
    }
}

fn kl_row(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean negative log-likelihood of `s[1..]` given the preceding token.
pub fn ce_loss(theta: &ToyLM, s: &[usize]) -> Result<f64, MolError> {
    theta.check(s)?;
    let n = (s.len() - 1) as f64;
    Ok(s.windows(2).map(|w| -theta.log_probs(w[0])[w[1]]).sum::<f64>() / n)
}

/// Mean over scored positions of `KL(p_theta(.|ctx) || p_0(.|ctx))`.
pub fn kl_loss(theta: &ToyLM, theta0: &ToyLM, s: &[usize]) -> Result<f64, MolError> {
    theta.check_shape(theta0)?;
    theta.check(s)?;
    let n = (s.len() - 1) as f64;
    Ok(s[..s.len() - 1]
        .iter()
        .map(|&c| kl_row(&theta.log_probs(c), &theta0.log_probs(c)))
        .sum::<f64>()
        / n)
}

/// Adds `scale * d ce_loss / d theta` into `grad`; returns the loss.
fn ce_accumulate(theta: &ToyLM, s: &[usize], scale: f64, grad: &mut [f64]) -> Result<f64, MolError> {
    theta.check(s)?;
    let n = (s.len() - 1) as f64;
    let v = theta.vocab;
    let mut loss = 0.0;
    for w in s.windows(2) {
        let lp = theta.log_probs(w[0]);
        loss -= lp[w[1]];
        let row = &mut grad[w[0] * v..(w[0] + 1) * v];
        for (j, g) in row.iter_mut().enumerate() {
            let target = if j == w[1] { 1.0 } else { 0.0 };
            *g += scale * (lp[j].exp() - target) / n;
        }
    }
    Ok(loss / n)
}

/// Adds `scale * d kl_loss / d theta` into `grad`; returns the loss.
fn kl_accumulate(theta: &ToyLM, theta0: &ToyLM, s: &[usize], scale: f64, grad: &mut [f64]) -> Result<f64, MolError> {
    theta.check_shape(theta0)?;
    theta.check(s)?;
    let n = (s.len() - 1) as f64;
    let v = theta.vocab;
    let mut loss = 0.0;
    for &c in &s[..s.len() - 1] {
        let lp = theta.log_probs(c);
        let lq = theta0.log_probs(c);
        let kl = kl_row(&lp, &lq);
        loss += kl;
        let row = &mut grad[c * v..(c + 1) * v];
        for (j, g) in row.iter_mut().enumerate() {
            *g += scale * lp[j].exp() * (lp[j] - lq[j] - kl) / n;
        }
    }
    Ok(loss / n)
}

pub fn ce_grad(theta: &ToyLM, s: &[usize]) -> Result<(f64, Vec<f64>), MolError> {
    let mut g = vec![0.0; theta.logits.len()];
    let l = ce_accumulate(theta, s, 1.0, &mut g)?;
    Ok((l, g))
}

pub fn kl_grad(theta: &ToyLM, theta0: &ToyLM, s: &[usize]) -> Result<(f64, Vec<f64>), MolError> {
    let mut g = vec![0.0; theta.logits.len()];
    let l = kl_accumulate(theta, theta0, s, 1.0, &mut g)?;
    Ok((l, g))
}

/// Equal numbers of domain and general sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedBatch {
    domain: Vec<Vec<usize>>,
    general: Vec<Vec<usize>>,
}

impl MixedBatch {
    pub fn new(domain: Vec<Vec<usize>>, general: Vec<Vec<usize>>) -> Result<Self, MolError> {
        if domain.is_empty() && general.is_empty() {
            return Err(MolError::EmptyBatch);
        }
        if domain.len() != general.len() {
            return Err(MolError::Unbalanced {
                domain: domain.len(),
                general: general.len(),
            });
        }
        Ok(MixedBatch { domain, general })
    }

    pub fn domain(&self) -> &[Vec<usize>] {
        &self.domain
    }

    pub fn general(&self) -> &[Vec<usize>] {
        &self.general
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, kl: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_domain: f64,
    pub kl_general: f64,
    pub total: f64,
}

fn sorted(seqs: &[Vec<usize>]) -> Vec<&Vec<usize>> {
    let mut v: Vec<&Vec<usize>> = seqs.iter().collect();
    v.sort();
    v
}

/// `w.ce * mean CE(domain) + w.kl * mean KL(general)` and its gradient.
/// Sequences are visited in sorted order so the result does not depend on
/// their order within the batch.
pub fn mixed_loss_and_grad(
    theta: &ToyLM,
    theta0: &ToyLM,
    domain: &[Vec<usize>],
    general: &[Vec<usize>],
    w: LossWeights,
) -> Result<(LossReport, Vec<f64>), MolError> {
    theta.check_shape(theta0)?;
    if domain.is_empty() && general.is_empty() {
        return Err(MolError::EmptyBatch);
    }
    let mut grad = vec![0.0; theta.logits.len()];
    let mut ce = 0.0;
    if !domain.is_empty() {
        let scale = w.ce / domain.len() as f64;
        for s in sorted(domain) {
            ce += ce_accumulate(theta, s, scale, &mut grad)?;
        }
        ce /= domain.len() as f64;
    }
    let mut kl = 0.0;
    if !general.is_empty() {
        let scale = w.kl / general.len() as f64;
        for s in sorted(general) {
            kl += kl_accumulate(theta, theta0, s, scale, &mut grad)?;
        }
        kl /= general.len() as f64;
    }
    Ok((
        LossReport {
            ce_domain: ce,
            kl_general: kl,
            total: w.ce * ce + w.kl * kl,
        },
        grad,
    ))
}

fn descend(theta: &ToyLM, grad: &[f64], lr: f64) -> ToyLM {
    let mut out = theta.clone();
    for (z, g) in out.logits.iter_mut().zip(grad) {
        *z -= lr * g;
    }
    out
}

/// One gradient-descent step on the unit-weighted mixed loss. The report
/// describes the loss before the step.
pub fn mol_step(theta: &ToyLM, theta0: &ToyLM, batch: &MixedBatch, lr: f64) -> Result<(ToyLM, LossReport), MolError> {
    weighted_step(theta, theta0, batch, LossWeights::default(), lr)
}

pub fn weighted_step(
    theta: &ToyLM,
    theta0: &ToyLM,
    batch: &MixedBatch,
    w: LossWeights,
    lr: f64,
) -> Result<(ToyLM, LossReport), MolError> {
    let (report, grad) = mixed_loss_and_grad(theta, theta0, &batch.domain, &batch.general, w)?;
    Ok((descend(theta, &grad, lr), report))
}

/// One step on domain cross-entropy alone; returns the loss before the step.
pub fn ce_only_step(theta: &ToyLM, domain: &[Vec<usize>], lr: f64) -> Result<(ToyLM, f64), MolError> {
    if domain.is_empty() {
        return Err(MolError::EmptyBatch);
    }
    let (report, grad) = mixed_loss_and_grad(theta, theta, domain, &[], LossWeights { ce: 1.0, kl: 0.0 })?;
    Ok((descend(theta, &grad, lr), report.ce_domain))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on domain plus KL on general.
    Mixed,
    /// Cross-entropy on domain only.
    CeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Both losses in every step.
    Joint,
    /// Cross-entropy on odd steps, KL on even steps.
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolConfig {
    pub objective: Objective,
    pub schedule: Schedule,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Reference logits are drawn from `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for MolConfig {
    fn default() -> Self {
        MolConfig {
            objective: Objective::Mixed,
            schedule: Schedule::Joint,
            learning_rate: 1.0,
            steps: 500,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolPoint {
    pub step: usize,
    pub ce_domain: f64,
    pub kl_general: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolOutcome {
    pub curve: Vec<MolPoint>,
    pub model: ToyLM,
    pub reference: ToyLM,
}

/// Full-batch training from a seeded reference. Each curve point holds the
/// losses after that step's update.
pub fn train_mol(batch: &MixedBatch, vocab: usize, cfg: &MolConfig) -> Result<MolOutcome, MolError> {
    let reference = ToyLM::random(vocab, cfg.init_scale, cfg.seed)?;
    let mut theta = reference.clone();
    let measure = |t: &ToyLM| -> Result<LossReport, MolError> {
        Ok(mixed_loss_and_grad(t, &reference, &batch.domain, &batch.general, LossWeights::default())?.0)
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let w = match (cfg.objective, cfg.schedule) {
            (Objective::CeOnly, _) => LossWeights { ce: 1.0, kl: 0.0 },
            (Objective::Mixed, Schedule::Joint) => LossWeights::default(),
            (Objective::Mixed, Schedule::Alternate) if step % 2 == 1 => LossWeights { ce: 1.0, kl: 0.0 },
            (Objective::Mixed, Schedule::Alternate) => LossWeights { ce: 0.0, kl: 1.0 },
        };
        theta = weighted_step(&theta, &reference, batch, w, cfg.learning_rate)?.0;
        let r = measure(&theta)?;
        curve.push(MolPoint {
            step,
            ce_domain: r.ce_domain,
            kl_general: r.kl_general,
        });
    }
    Ok(MolOutcome {
        curve,
        model: theta,
        reference,
    })
}

/// `step,ce_domain,kl_general`
pub fn mol_curve_csv(curve: &[MolPoint]) -> String {
    let mut out = String::from("step,ce_domain,kl_general\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.ce_domain, p.kl_general));
    }
    out
}

/// Built-in paired corpus: one long domain sequence that passes through
/// token 5 once, and one general sequence that stays in token 5's context.
pub fn toy_corpus() -> (MixedBatch, usize) {
    let mut domain: Vec<usize> = (0..4).flat_map(|_| 0..5).collect();
    domain.extend([5, 0]);
    let general = vec![5; 10];
    (MixedBatch::new(vec![domain], vec![general]).expect("balanced"), 6)
}

/// Whitespace-token vocabulary, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let ids: BTreeMap<String, usize> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(|t| (t.to_string(), 0))
            .collect();
        let tokens: Vec<String> = ids.keys().cloned().collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, line: &str) -> Result<Vec<usize>, MolError> {
        line.split_whitespace()
            .map(|t| self.ids.get(t).copied().ok_or_else(|| MolError::Corpus(format!("unknown token `{t}`"))))
            .collect()
    }

    /// One token per line.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)
    }
}

/// Reads one sequence per non-blank line from each file and builds a
/// shared vocabulary.
pub fn load_text_corpora(domain: &Path, general: &Path) -> Result<(MixedBatch, Vocab), MolError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| MolError::Corpus(format!("{}: {e}", p.display())))
    };
    let (d, g) = (read(domain)?, read(general)?);
    let vocab = Vocab::from_texts(d.lines().chain(g.lines()));
    let encode = |text: &str| -> Result<Vec<Vec<usize>>, MolError> {
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| vocab.encode(l)).collect()
    };
    let batch = MixedBatch::new(encode(&d)?, encode(&g)?)?;
    Ok((batch, vocab))
}
