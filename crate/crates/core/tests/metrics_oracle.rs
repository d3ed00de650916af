#[path = "common/metric_oracle.rs"]
mod metric_oracle;

use gsnet_core::metrics::{macro_auc_ovr, macro_f1};
use metric_oracle::{brute_force_f1, pairwise_auc, random_confusion, random_instance};

#[test]
fn auc_matches_pair_counting() {
    for seed in 0..50 {
        let (probs, labels) = random_instance(50, seed);
        let got = macro_auc_ovr(&probs, &labels).unwrap().macro_auc;
        let want = pairwise_auc(&probs, &labels);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn f1_matches_per_class_tallies() {
    for seed in 0..50 {
        let m = random_confusion(seed);
        assert_eq!(macro_f1(&m), brute_force_f1(&m), "seed {seed}: {m:?}");
    }
}
