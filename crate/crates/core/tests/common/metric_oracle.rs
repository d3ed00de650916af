//! Brute-force metric references.

#![allow(dead_code, clippy::needless_range_loop)]

use gsnet_core::rng;
use rand::RngExt;

/// One-vs-rest AUC by comparing every positive with every negative.
pub fn pairwise_auc(probs: &[[f64; 3]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..3 {
        let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| probs[i][c]).collect();
        let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != c).map(|i| probs[i][c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        total += wins / (pos.len() * neg.len()) as f64;
        classes += 1;
    }
    total / classes as f64
}

/// Macro F1 from per-class true/false positive and false negative tallies.
pub fn brute_force_f1(m: &[[u64; 3]; 3]) -> f64 {
    let mut sum = 0.0;
    for c in 0..3 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for t in 0..3 {
            for p in 0..3 {
                match (t == c, p == c) {
                    (true, true) => tp += m[t][p],
                    (false, true) => fp += m[t][p],
                    (true, false) => fn_ += m[t][p],
                    _ => {}
                }
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        sum += if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    }
    sum / 3.0
}

/// Random probability rows with deliberate ties: scores are drawn from a
/// coarse grid so equal values are common.
pub fn random_instance(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut r = rng::seeded(seed, 3000);
    let probs = (0..n)
        .map(|_| {
            let raw = [0; 3].map(|_| r.random_range(1..6) as f64);
            let s: f64 = raw.iter().sum();
            raw.map(|v| v / s)
        })
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    (probs, labels)
}

pub fn random_confusion(seed: u64) -> [[u64; 3]; 3] {
    let mut r = rng::seeded(seed, 4000);
    [0; 3].map(|_| [0; 3].map(|_| if r.random_bool(0.2) { 0 } else { r.random_range(0..30) }))
}
