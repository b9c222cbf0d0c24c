//! AUROC by the Mann-Whitney rank statistic and average precision.

use super::MetricError;

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != positives.len() {
        return Err(MetricError::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Invalid("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate(format!(
            "need both classes, found {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok((n_pos, n_neg))
}

/// `P(score_pos > score_neg) + P(tie) / 2`.
///
/// Computed from mid-ranks: ties share the average of the ranks they span.
pub fn binary_auroc(scores: &[f64], positives: &[bool]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; twice the mid-rank keeps everything integral.
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if positives[idx] {
                pos_rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    // 2U = 2 * sum(ranks) - n_pos (n_pos + 1)
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Average precision: the mean over positives of the precision at that
/// positive's rank in descending-score order. Ties keep index order.
pub fn binary_auprc(scores: &[f64], positives: &[bool]) -> Result<f64, MetricError> {
    let (n_pos, _) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positives[idx] {
            tp += 1;
            total += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}
