//! Input generators shared by the benchmarks.

use moler_core::{EmbeddingVector, RankedList};

/// Deterministic pseudo-random values in [0, 1) from a 64-bit LCG.
pub fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

/// `lists` rankings of `depth` documents drawn from a pool of `pool` ids.
pub fn random_lists(lists: usize, depth: usize, pool: usize, seed: u64) -> Vec<RankedList> {
    (0..lists)
        .map(|l| {
            let scores = lcg_values(seed + l as u64, pool);
            let full = RankedList::from_scores(
                format!("L{l}"),
                scores.into_iter().enumerate().map(|(i, s)| (format!("d{i:06}"), s)),
            )
            .expect("finite unique scores");
            RankedList::from_sorted(full.label(), full.entries()[..depth.min(pool)].to_vec()).expect("prefix stays sorted")
        })
        .collect()
}

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    (0..n)
        .map(|i| {
            let v = lcg_values(seed ^ (i as u64 + 1), dim).into_iter().map(|x| x - 0.5).collect();
            EmbeddingVector::new(v).expect("finite")
        })
        .collect()
}
