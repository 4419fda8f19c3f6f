//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use moler_core::mol::ToyLM;
use moler_core::rl::{ComponentOutput, Group, RolloutOutput, ToyPolicy, Variant};
use moler_core::RankedList;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-document sum of `1/(rank + k)` over every list, sorted by
/// (-score, id).
pub fn rrf_bruteforce(lists: &[RankedList], k: f64) -> Vec<(String, f64)> {
    let mut docs: BTreeSet<String> = BTreeSet::new();
    for l in lists {
        docs.extend(l.doc_ids().map(str::to_string));
    }
    let mut out: Vec<(String, f64)> = docs
        .into_iter()
        .map(|d| {
            let mut terms: Vec<f64> = Vec::new();
            for l in lists {
                for (i, id) in l.doc_ids().enumerate() {
                    if id == d {
                        terms.push(1.0 / ((i + 1) as f64 + k));
                    }
                }
            }
            // largest terms first so exact ties stay exact
            terms.sort_by(|a, b| b.partial_cmp(a).unwrap());
            (d, terms.iter().sum())
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

/// A ranking of `n` documents drawn from `pool` ids, with random scores.
pub fn random_list(r: &mut ChaCha8Rng, label: &str, n: usize, pool: usize) -> RankedList {
    let mut ids: Vec<usize> = (0..pool).collect();
    for i in (1..ids.len()).rev() {
        let j = r.random_range(0..=i);
        ids.swap(i, j);
    }
    let scores = ids[..n.min(pool)].iter().map(|&i| {
        // coarse scores so ties occur
        (format!("d{i:02}"), f64::from(r.random_range(0..6u8)))
    });
    RankedList::from_scores(label, scores.collect::<Vec<_>>()).unwrap()
}

pub fn recall_oracle(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let top: BTreeSet<&String> = ranked.iter().take(k).collect();
    let hit = relevant.iter().filter(|d| top.contains(d)).count();
    Some(hit as f64 / relevant.len() as f64)
}

pub fn ndcg_oracle(ranked: &[String], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let mut ideal: Vec<f64> = grades.values().filter(|&&g| g > 0).map(|&g| f64::from(g)).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let dcg = |gains: &mut dyn Iterator<Item = f64>| -> f64 {
        gains.take(k).enumerate().map(|(i, g)| g / ((i as f64) + 2.0).log2()).sum()
    };
    let actual = dcg(&mut ranked.iter().map(|d| f64::from(*grades.get(d).unwrap_or(&0))));
    let best = dcg(&mut ideal.into_iter());
    Some(actual / best)
}

/// Two-pass mean and population std.
pub fn advantages_oracle(r: &[f64], variant: Variant, floor: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mut mean = 0.0;
    for x in r {
        mean += x;
    }
    mean /= n;
    let mut ss = 0.0;
    for x in r {
        ss += (x - mean) * (x - mean);
    }
    let std = (ss / n).sqrt();
    match variant {
        _ if r.iter().all(|&x| x == r[0]) => vec![0.0; r.len()],
        Variant::DrGrpo => r.iter().map(|x| x - mean).collect(),
        Variant::Grpo if std == 0.0 => vec![0.0; r.len()],
        Variant::Grpo => r.iter().map(|x| (x - mean) / std.max(floor)).collect(),
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Surrogate value from raw logits, written straight from its definition.
pub fn surrogate_oracle(
    logits: &[Vec<f64>],
    ref_logits: &[Vec<f64>],
    group: &Group,
    adv: &[f64],
    variant: Variant,
    beta: f64,
) -> f64 {
    let mut total = 0.0;
    for (out, a) in group.outputs.iter().zip(adv) {
        for (c, co) in out.components.iter().enumerate() {
            let lp = log_softmax(&logits[c]);
            let lr = log_softmax(&ref_logits[c]);
            let kl: f64 = (0..lp.len()).map(|j| lp[j].exp() * (lp[j] - lr[j])).sum();
            let mut s = 0.0;
            for (t, &tok) in co.tokens.iter().enumerate() {
                s += (lp[tok] - co.logprobs_old[t]).exp() * a - beta * kl;
            }
            total += match variant {
                Variant::Grpo => s / co.tokens.len() as f64,
                Variant::DrGrpo => s,
            };
        }
    }
    total / group.outputs.len() as f64
}

pub fn random_logits(r: &mut ChaCha8Rng, sizes: &[usize], scale: f64) -> Vec<Vec<f64>> {
    sizes
        .iter()
        .map(|&n| (0..n).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

/// Group of `g` rollouts with 1..=4 tokens per component, sampled
/// uniformly; old log-probs come from a perturbation of `logits`.
pub fn random_group(r: &mut ChaCha8Rng, logits: &[Vec<f64>], ref_logits: &[Vec<f64>], g: usize) -> Group {
    let old: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| log_softmax(&row.iter().map(|x| x + r.random_range(-0.3..0.3)).collect::<Vec<_>>()))
        .collect();
    let refl: Vec<Vec<f64>> = ref_logits.iter().map(|row| log_softmax(row)).collect();
    let outputs = (0..g)
        .map(|_| RolloutOutput {
            components: logits
                .iter()
                .enumerate()
                .map(|(c, row)| {
                    let len = r.random_range(1..=4);
                    let tokens: Vec<usize> = (0..len).map(|_| r.random_range(0..row.len())).collect();
                    ComponentOutput {
                        logprobs_old: tokens.iter().map(|&t| old[c][t]).collect(),
                        logprobs_ref: tokens.iter().map(|&t| refl[c][t]).collect(),
                        tokens,
                    }
                })
                .collect(),
            reward: r.random_range(0.0..1.0),
        })
        .collect();
    Group {
        query_id: "rand".into(),
        outputs,
    }
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` over every entry of a ragged parameter set.
pub fn fd_grad_ragged(params: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::new();
    for c in 0..params.len() {
        let mut row = Vec::new();
        for j in 0..params[c].len() {
            let x = p[c][j];
            p[c][j] = x + h;
            let up = f(&p);
            p[c][j] = x - h;
            let down = f(&p);
            p[c][j] = x;
            row.push((up - down) / (2.0 * h));
        }
        out.push(row);
    }
    out
}

pub fn fd_grad_flat(params: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = f(&p);
            p[i] = x - h;
            let down = f(&p);
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn policy(logits: &[Vec<f64>]) -> ToyPolicy {
    ToyPolicy::from_logits(logits.to_vec()).unwrap()
}

/// Cross-entropy from the definition, one log-sum-exp per position.
pub fn ce_oracle(theta: &ToyLM, s: &[usize]) -> f64 {
    let v = theta.vocab();
    let mut total = 0.0;
    for w in s.windows(2) {
        let row = &theta.logits()[w[0] * v..(w[0] + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        total += lse - row[w[1]];
    }
    total / (s.len() - 1) as f64
}

pub fn kl_oracle(theta: &ToyLM, theta0: &ToyLM, s: &[usize]) -> f64 {
    let v = theta.vocab();
    let mut total = 0.0;
    for &c in &s[..s.len() - 1] {
        let p = log_softmax(&theta.logits()[c * v..(c + 1) * v]);
        let q = log_softmax(&theta0.logits()[c * v..(c + 1) * v]);
        total += (0..v).map(|j| p[j].exp() * (p[j] - q[j])).sum::<f64>();
    }
    total / (s.len() - 1) as f64
}

pub fn random_seq(r: &mut ChaCha8Rng, v: usize, min: usize, max: usize) -> Vec<usize> {
    let n = r.random_range(min..=max);
    (0..n).map(|_| r.random_range(0..v)).collect()
}

pub fn doc(id: &str, text: &str) -> moler_core::Document {
    moler_core::Document {
        id: id.into(),
        title: String::new(),
        text: text.into(),
    }
}

pub fn query(id: &str, text: &str) -> moler_core::Query {
    moler_core::Query {
        id: id.into(),
        text: text.into(),
    }
}

/// Sub-queries the scripted model returns for `q`.
pub fn sub_queries(q: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{q} variant {i}")).collect()
}

/// Scripts MQR, MSLF-CQE and one MMLF-CQE response per sub-query, plus
/// q2d and cot, so every strategy runs clean for `q` at expansion count `n`.
pub fn script_all(
    mock: &mut moler_core::MockChat,
    t: &moler_core::PromptTemplates,
    q: &str,
    n: usize,
    passage: &str,
) {
    let subs = sub_queries(q, n);
    let numbered: String = subs.iter().enumerate().map(|(i, s)| format!("{}. {s}\n", i + 1)).collect();
    mock.script(&t.render_mqr(q, n), numbered);
    mock.script(&t.render_cqe(q, &subs), format!("Passage: {passage}"));
    for s in &subs {
        mock.script(&t.render_cqe(s, &[]), format!("Passage: {passage}"));
    }
    mock.script(&t.render_q2d(q), format!("Passage: {passage}"));
    mock.script(&t.render_cot(q), format!("Passage: {passage}"));
}

const RELEVANT_WORDS: [&str; 10] = [
    "kinase", "ribosome", "telomere", "chaperone", "integrin", "cytokine", "histone", "lysosome", "peroxisome",
    "spliceosome",
];

/// 50 documents: ten relevant documents built from words no query uses,
/// and forty fillers sharing the query vocabulary. Raw query retrieval puts
/// every relevant document below all fillers.
pub fn gain_dataset() -> (Vec<moler_core::Document>, Vec<moler_core::Query>, moler_core::RelevanceJudgments) {
    let mut docs = Vec::new();
    for (i, w) in RELEVANT_WORDS.iter().enumerate() {
        docs.push(doc(&format!("d{i:02}"), &format!("{w} activation pathway {w} regulation")));
    }
    let topics = ["patient", "outcome", "trial", "cohort", "dose"];
    for j in 10..50 {
        let t = topics[j % topics.len()];
        docs.push(doc(&format!("d{j:02}"), &format!("clinical study {t} report number{j}")));
    }
    let mut queries = Vec::new();
    let mut qrels = moler_core::RelevanceJudgments::new();
    for i in 0..RELEVANT_WORDS.len() {
        let qid = format!("q{i}");
        queries.push(query(&qid, &format!("clinical study question {i}")));
        qrels.insert(qid, format!("d{i:02}"), 1);
    }
    (docs, queries, qrels)
}

/// Passage the scripted model writes for gain-dataset query `i`.
pub fn gain_passage(i: usize) -> String {
    let w = RELEVANT_WORDS[i];
    format!("{w} activation pathway and {w} regulation")
}

/// Unit-weighted mixed objective: mean domain CE plus mean general KL.
pub fn mol_total_oracle(theta: &ToyLM, theta0: &ToyLM, domain: &[Vec<usize>], general: &[Vec<usize>]) -> f64 {
    let ce: f64 = domain.iter().map(|s| ce_oracle(theta, s)).sum::<f64>() / domain.len() as f64;
    let kl: f64 = general.iter().map(|s| kl_oracle(theta, theta0, s)).sum::<f64>() / general.len() as f64;
    ce + kl
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max)
}

/// Worst finite-difference error of the surrogate gradient over `seeds`
/// random groups of size `g`.
pub fn surrogate_fd_worst(seeds: std::ops::Range<u64>, g: usize, beta: f64, variant: Variant) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(seed);
        let sizes = [3, 5];
        let logits = random_logits(&mut r, &sizes, 1.5);
        let ref_logits = random_logits(&mut r, &sizes, 1.5);
        let group = random_group(&mut r, &logits, &ref_logits, g);
        let adv = moler_core::rl::advantages(variant, &group.rewards(), 1e-8).unwrap();
        let s = moler_core::rl::surrogate_objective(&policy(&logits), &policy(&ref_logits), &group, &adv, variant, beta)
            .unwrap();
        let numeric = fd_grad_ragged(&logits, 1e-5, |p| {
            surrogate_oracle(p, &ref_logits, &group, adv.values(), variant, beta)
        });
        let a: Vec<f64> = s.grad.concat();
        worst = worst.max(max_rel_err(&a, &numeric.concat()));
        let direct = surrogate_oracle(&logits, &ref_logits, &group, adv.values(), variant, beta);
        assert!((s.objective - direct).abs() < 1e-12, "objective mismatch at seed {seed}");
    }
    worst
}

/// Worst finite-difference error of the mixed-loss gradient over `seeds`.
pub fn mol_fd_worst(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(seed);
        let v = 4;
        let theta = ToyLM::random(v, 1.0, seed).unwrap();
        let theta0 = ToyLM::random(v, 1.0, seed + 1000).unwrap();
        let domain: Vec<Vec<usize>> = (0..3).map(|_| random_seq(&mut r, v, 2, 7)).collect();
        let general: Vec<Vec<usize>> = (0..3).map(|_| random_seq(&mut r, v, 2, 7)).collect();
        let (_, grad) = moler_core::mol::mixed_loss_and_grad(
            &theta,
            &theta0,
            &domain,
            &general,
            moler_core::mol::LossWeights::default(),
        )
        .unwrap();
        let numeric = fd_grad_flat(theta.logits(), 1e-5, |p| {
            let t = ToyLM::from_logits(v, p.to_vec()).unwrap();
            mol_total_oracle(&t, &theta0, &domain, &general)
        });
        worst = worst.max(max_rel_err(&grad, &numeric));
    }
    worst
}
