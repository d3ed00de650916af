//! Accuracy, macro F1 and one-vs-rest macro AUC for the three-class task.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;

/// `counts[true][pred]`
pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(Error::invalid(format!("class out of range: true {t}, pred {p}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn total(m: &Confusion) -> u64 {
    m.iter().flatten().sum()
}

/// Trace over total; 0 for an empty matrix.
pub fn accuracy(m: &Confusion) -> f64 {
    let n = total(m);
    if n == 0 {
        return 0.0;
    }
    (0..NUM_CLASSES).map(|c| m[c][c]).sum::<u64>() as f64 / n as f64
}

/// Per-class F1; a class with precision + recall = 0 (or no support at all)
/// scores 0.
pub fn per_class_f1(m: &Confusion) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (c, f1) in out.iter_mut().enumerate() {
        let tp = m[c][c] as f64;
        let row: u64 = m[c].iter().sum();
        let col: u64 = m.iter().map(|r| r[c]).sum();
        let precision = if col == 0 { 0.0 } else { tp / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp / row as f64 };
        *f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    out
}

pub fn macro_f1(m: &Confusion) -> f64 {
    per_class_f1(m).iter().sum::<f64>() / NUM_CLASSES as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub macro_auc: f64,
    /// `None` for classes skipped for lacking positives or negatives.
    pub per_class: [Option<f64>; NUM_CLASSES],
}

impl AucResult {
    pub fn skipped(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&c| self.per_class[c].is_none()).collect()
    }
}

/// Mann–Whitney AUC of `scores` separating `positive` from the rest, using
/// midranks so each tied pair counts ½. `None` if either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&s| positive[s]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// One-vs-rest AUC per class, macro-averaged over non-degenerate classes.
pub fn macro_auc_ovr(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<AucResult> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        *slot = binary_auc(&scores, &positive);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("AUC undefined: every class lacks positives or negatives"));
    }
    Ok(AucResult {
        macro_auc: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub auc_skipped: Vec<usize>,
    pub confusion: Confusion,
}

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "early", "advanced"];

impl EvalResult {
    pub fn from_predictions(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<Self> {
        let preds: Vec<usize> = probs
            .iter()
            .map(|p| {
                // Lowest index wins ties.
                (1..NUM_CLASSES).fold(0, |best, c| if p[c] > p[best] { c } else { best })
            })
            .collect();
        let confusion = confusion_matrix(&preds, labels)?;
        let auc = macro_auc_ovr(probs, labels)?;
        Ok(EvalResult {
            accuracy: accuracy(&confusion),
            macro_f1: macro_f1(&confusion),
            macro_auc: auc.macro_auc,
            auc_skipped: auc.skipped(),
            confusion,
        })
    }

    pub const CSV_HEADER: &'static str = "acc,macro_f1,macro_auc";

    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4}", self.accuracy, self.macro_f1, self.macro_auc)
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy   {:.4}", self.accuracy);
        let _ = writeln!(out, "macro F1   {:.4}", self.macro_f1);
        let _ = writeln!(out, "macro AUC  {:.4}", self.macro_auc);
        for &c in &self.auc_skipped {
            let _ = writeln!(out, "  AUC skipped for class {} (no positives or no negatives)", CLASS_NAMES[c]);
        }
        let _ = writeln!(out, "confusion (rows = true, cols = predicted)");
        let _ = writeln!(out, "{:>10} {:>8} {:>8} {:>8}", "", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2]);
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(out, "{:>10} {:>8} {:>8} {:>8}", CLASS_NAMES[c], row[0], row[1], row[2]);
        }
        out
    }
}
