//! Per-device classification metrics, cross-device micro/macro
//! aggregation, and the adjusted Rand index for cluster recovery.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetric {
    pub device_id: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub test_size: usize,
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Macro F1 over the classes that occur in `labels`; a class with no
/// predicted and no actual positives would be skipped, and one with
/// `P + R = 0` scores zero.
pub fn f1_score(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= classes || p >= classes {
            return Err(Error::invalid(format!("class index out of range for {classes} classes")));
        }
        pred_count[p] += 1;
        true_count[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in (0..classes).filter(|&c| true_count[c] > 0) {
        present += 1;
        let precision = if pred_count[c] > 0 {
            tp[c] as f64 / pred_count[c] as f64
        } else {
            0.0
        };
        let recall = tp[c] as f64 / true_count[c] as f64;
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / present as f64)
}

/// Size-weighted mean of per-device values.
pub fn micro_aggregate(values: &[f64], sizes: &[usize]) -> Result<f64> {
    check_len(values.len(), sizes.len())?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("total size is zero"));
    }
    if sizes.windows(2).all(|w| w[0] == w[1]) {
        return macro_aggregate(values);
    }
    let weighted: f64 = values.iter().zip(sizes).map(|(v, &s)| v * s as f64).sum();
    Ok(weighted / total as f64)
}

pub fn macro_aggregate(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("metric values"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the contingency table of the two labelings.
pub fn adjusted_rand_index(assignment: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(assignment.len(), truth.len())?;
    if truth.is_empty() {
        return Err(Error::Empty("partition"));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&a, &t) in assignment.iter().zip(truth) {
        *table.entry((a, t)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| choose2(n)).sum();
    let expected = sum_rows * sum_cols / choose2(truth.len()).max(1.0);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // Both partitions trivial (single block or all singletons).
        let same = table.len() == rows.len() && table.len() == cols.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_score(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let f = f1_score(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        // class 2 absent from labels is not averaged in
        assert_eq!(f1_score(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert!(f1_score(&[0], &[0, 1], 2).is_err());
    }

    /// Confusion-matrix F1, written independently of `f1_score`.
    fn f1_oracle(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
        let mut cm = vec![vec![0f64; classes]; classes];
        for (&p, &y) in preds.iter().zip(labels) {
            cm[y][p] += 1.0;
        }
        let mut scores = Vec::new();
        for c in 0..classes {
            let support: f64 = cm[c].iter().sum();
            if support == 0.0 {
                continue;
            }
            let predicted: f64 = (0..classes).map(|r| cm[r][c]).sum();
            let tp = cm[c][c];
            // F1 = 2TP / (2TP + FP + FN)
            let denom = predicted + support;
            scores.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / denom });
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn f1_matches_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let classes = rng.random_range(2..6);
            let n = rng.random_range(1..40);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let got = f1_score(&preds, &labels, classes).unwrap();
            assert!((got - f1_oracle(&preds, &labels, classes)).abs() < 1e-12);
            let perfect = f1_score(&labels, &labels, classes).unwrap();
            assert_eq!(perfect, 1.0);
            assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        }
    }

    #[test]
    fn aggregation_cases() {
        assert_eq!(micro_aggregate(&[0.5, 1.0], &[10, 30]).unwrap(), 0.875);
        assert_eq!(micro_aggregate(&[0.3], &[7]).unwrap(), 0.3);
        assert_eq!(macro_aggregate(&[0.5, 1.0]).unwrap(), 0.75);
        assert_eq!(macro_aggregate(&[0.4; 5]).unwrap(), 0.4);
        let (a, b) = (macro_aggregate(&[0.1, 0.9, 0.4]).unwrap(), macro_aggregate(&[0.9, 0.4, 0.1]).unwrap());
        assert!((a - b).abs() < 1e-15);
        let v = [0.25, 0.5, 0.75, 1.0];
        assert_eq!(micro_aggregate(&v, &[3; 4]).unwrap(), macro_aggregate(&v).unwrap());
        assert!(micro_aggregate(&[1.0], &[0]).is_err());
        assert!(macro_aggregate(&[]).is_err());
    }

    /// ARI via the pair-confusion matrix over all sample pairs.
    fn ari_pairs(x: &[usize], y: &[usize]) -> f64 {
        let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                match (x[i] == x[j], y[i] == y[j]) {
                    (true, true) => a += 1.0,
                    (true, false) => b += 1.0,
                    (false, true) => c += 1.0,
                    (false, false) => d += 1.0,
                }
            }
        }
        2.0 * (a * d - b * c) / ((a + b) * (b + d) + (a + c) * (c + d))
    }

    #[test]
    fn ari_fixed_example() {
        let x = [0, 0, 1, 1, 2, 2];
        let y = [0, 0, 0, 1, 1, 1];
        let want = ari_pairs(&x, &y);
        assert!((want - 8.0 / 33.0).abs() < 1e-15);
        assert!((adjusted_rand_index(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ari_identity_and_relabel() {
        let t = [0, 1, 1, 2, 0, 2, 2];
        assert_eq!(adjusted_rand_index(&t, &t).unwrap(), 1.0);
        let relabeled: Vec<usize> = t.iter().map(|&v| [5, 9, 1][v]).collect();
        assert_eq!(adjusted_rand_index(&relabeled, &t).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ari_matches_pair_oracle_and_is_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let n = rng.random_range(4..30);
            let x: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let oracle = ari_pairs(&x, &y);
            if !oracle.is_finite() {
                continue;
            }
            let got = adjusted_rand_index(&x, &y).unwrap();
            assert!((got - oracle).abs() < 1e-12);
            let xr: Vec<usize> = x.iter().map(|&v| 3 - v).collect();
            assert!((adjusted_rand_index(&xr, &y).unwrap() - got).abs() < 1e-12);
        }
    }
}
