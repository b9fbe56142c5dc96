//! Ranking and classification metrics. Positives are LLM-generated texts and
//! higher scores mean "more likely positive".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("scores contain NaN".into()));
    }
    let p = positive.iter().filter(|&&x| x).count();
    Ok((p, positive.len() - p))
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from mid-ranks.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = check(scores, positive)?;
    if p == 0 || n == 0 {
        return Err(Error::Validation("AUROC needs both classes".into()));
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
        // ranks are 1-based; a tie block shares its average rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve, one point per distinct score (predict positive at `score ≥
/// threshold`), starting at (0, 0).
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Result<Vec<RocPoint>> {
    let (p, n) = check(scores, positive)?;
    if p == 0 || n == 0 {
        return Err(Error::Validation("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(pts)
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn f1(predicted: &[bool], positive: &[bool]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&pr, &y) in predicted.iter().zip(positive) {
        match (pr, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub f1: f64,
}

/// Best-F1 threshold among midpoints of consecutive distinct scores. With a
/// single distinct score that score is the only candidate. Ties keep the
/// lowest threshold.
pub fn f1_sweep(scores: &[f64], positive: &[bool]) -> Result<ThresholdChoice> {
    check(scores, positive)?;
    if scores.is_empty() {
        return Err(Error::Validation("no scores to sweep".into()));
    }
    let mut uniq = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let candidates: Vec<f64> = if uniq.len() == 1 {
        uniq
    } else {
        uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    };
    let mut best = ThresholdChoice {
        threshold: candidates[0],
        f1: -1.0,
    };
    for t in candidates {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let f = f1(&pred, positive);
        if f > best.f1 {
            best = ThresholdChoice {
                threshold: t,
                f1: f,
            };
        }
    }
    Ok(best)
}

/// Row-normalized confusion matrix; `matrix[true][predicted]`. Classes
/// without examples get an all-zero row.
pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1.0;
    }
    for row in &mut m {
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|x| *x /= z);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    total += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / total
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&[3.0, 4.0, 1.0, 2.0], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[1.0; 6], &[true, false, true, false, true, false]).unwrap(),
            0.5
        );
        assert_eq!(
            auroc(&[3.0, 1.0, 2.0, 0.0], &[true, true, false, false]).unwrap(),
            0.75
        );
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            items in prop::collection::vec((0i32..20, any::<bool>()), 2..200),
        ) {
            let scores: Vec<f64> = items.iter().map(|&(s, _)| s as f64 / 4.0).collect();
            let labels: Vec<bool> = items.iter().map(|&(_, y)| y).collect();
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise(&scores, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
            prop_assert!((auroc(&warped, &labels).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_ends_at_one_one() {
        let pts = roc_points(&[0.9, 0.8, 0.8, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(pts.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn f1_examples() {
        let c = f1_sweep(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!((c.threshold, c.f1), (0.5, 1.0));
        // everything predicted positive: precision 1/2, recall 1
        assert!((f1(&[true; 4], &[true, false, true, false]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&[false; 3], &[true, false, true]), 0.0);
        let c = f1_sweep(&[0.5; 3], &[true, false, true]).unwrap();
        assert!((c.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn f1_sweep_matches_exhaustive_oracle() {
        let scores = [0.3, 0.1, 0.7, 0.7, 0.2, 0.9, 0.4, 0.5];
        let labels = [false, false, true, false, true, true, false, true];
        let best = f1_sweep(&scores, &labels).unwrap();
        // any cut between sorted scores, tried directly
        let mut oracle: f64 = 0.0;
        for &t in &scores {
            let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
            oracle = oracle.max(f1(&pred, &labels));
        }
        assert_eq!(best.f1, oracle);
    }

    #[test]
    fn confusion_rows() {
        let m = confusion(&[0, 0, 1, 1, 1, 2], &[0, 1, 1, 1, 0, 2], 4);
        assert_eq!(m[0], vec![0.5, 0.5, 0.0, 0.0]);
        assert!((m[1][1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[2][2], 1.0);
        assert_eq!(m[3], vec![0.0; 4]);
    }
}
