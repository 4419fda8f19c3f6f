mod common;

use moler_core::rl::{compute_reward, total_variation, RewardSpec, train_toy, GrpoConfig, ToyEnv, Variant};
use moler_core::{build_index, OfflineEmbedder};

fn cfg(variant: Variant, beta: f64, lr: f64) -> GrpoConfig {
    GrpoConfig {
        variant,
        beta,
        learning_rate: lr,
        seed: 7,
        ..GrpoConfig::default()
    }
}

#[test]
fn greedy_policy_finds_the_good_passage() {
    let (env, good) = ToyEnv::retrieval().unwrap();
    for variant in [Variant::Grpo, Variant::DrGrpo] {
        let out = train_toy(&env, &cfg(variant, 0.0, 1.0), 200).unwrap();
        assert_eq!(out.policy.greedy(1), good, "{variant:?}");
    }
}

#[test]
fn strong_kl_anchor_keeps_policy_near_reference() {
    // plain ascent needs lr * beta of order one to stay stable
    let (env, _) = ToyEnv::retrieval().unwrap();
    let anchored = train_toy(&env, &cfg(Variant::DrGrpo, 1e3, 1e-3), 200).unwrap();
    let free = train_toy(&env, &cfg(Variant::DrGrpo, 0.0, 1e-3), 200).unwrap();
    let tv = total_variation(&anchored.policy, &anchored.reference);
    let tv_free = total_variation(&free.policy, &free.reference);
    assert!(tv <= 0.05, "{tv}");
    assert!(tv < tv_free, "{tv} vs {tv_free}");
}

#[test]
fn rewards_stay_in_unit_interval() {
    let (docs, queries, qrels) = common::gain_dataset();
    let e = OfflineEmbedder::new(1024).unwrap();
    let idx = build_index(&docs, &e).unwrap();
    let mut r = common::rng(2);
    let words: Vec<&str> = docs.iter().flat_map(|d| d.text.split(' ')).collect();
    for _ in 0..100 {
        let q = &queries[rand::Rng::random_range(&mut r, 0..queries.len())];
        let passage: Vec<&str> = (0..6).map(|_| words[rand::Rng::random_range(&mut r, 0..words.len())]).collect();
        let k = rand::Rng::random_range(&mut r, 1..20);
        let spec = RewardSpec { k, ..RewardSpec::default() };
        let reward = compute_reward(q, &passage.join(" "), &qrels, &idx, &e, &spec).unwrap();
        assert!((0.0..=1.0).contains(&reward));
    }
}
