//! Threshold-free ranking metrics for one binary (one-vs-rest) problem.

use std::cmp::Ordering;

/// Sorted `(score, is_positive)` pairs, highest score first.
fn ranked(scores: &[f64], positive: &[bool]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    v
}

/// Runs of equal score as `(positives, negatives)`, highest score first.
fn tie_groups(scores: &[f64], positive: &[bool]) -> Vec<(u64, u64)> {
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for (s, pos) in ranked(scores, positive) {
        if last != Some(s) {
            groups.push((0, 0));
            last = Some(s);
        }
        let g = groups.last_mut().unwrap();
        if pos {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` without at least one of each.
pub fn binary_roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let pos = positive.iter().filter(|&&p| p).count() as u64;
    let neg = positive.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Counted in half-units so the sum is exact.
    let mut half_wins: u64 = 0;
    let mut neg_below = neg;
    for (p, n) in tie_groups(scores, positive) {
        neg_below -= n;
        half_wins += p * (2 * neg_below + n);
    }
    Some(half_wins as f64 / (2 * pos * neg) as f64)
}

/// Step-wise average precision `sum_k (R_k - R_{k-1}) P_k` over descending
/// distinct thresholds. `None` when there is no positive.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let total_pos = positive.iter().filter(|&&p| p).count() as u64;
    if total_pos == 0 {
        return None;
    }
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for (p, n) in tie_groups(scores, positive) {
        if p > 0 {
            let precision = (tp + p) as f64 / (tp + p + fp + n) as f64;
            ap += p as f64 / total_pos as f64 * precision;
        }
        tp += p;
        fp += n;
    }
    Some(ap)
}
