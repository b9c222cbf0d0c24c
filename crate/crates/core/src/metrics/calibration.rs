use serde::{Deserialize, Serialize};

use super::{binary_auroc, correctness, MetricError, PredictionBatch};

pub const DEFAULT_ECE_BINS: usize = 15;

/// One equal-width confidence bin of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn bin_index(confidence: f64, num_bins: usize) -> usize {
    // Bin b holds b <= c * B < b + 1; c = 1.0 lands in the last bin.
    ((confidence * num_bins as f64).floor() as usize).min(num_bins - 1)
}

/// Per-bin statistics over max-probability confidence. Empty bins are kept
/// with zero count.
pub fn ece_bins(batch: &PredictionBatch, num_bins: usize) -> Result<Vec<EceBin>, MetricError> {
    if num_bins == 0 {
        return Err(MetricError::Invalid("num_bins must be positive".into()));
    }
    let conf = batch.confidences();
    let correct = correctness(batch);
    let mut sum_conf = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (c, ok) in conf.iter().zip(&correct) {
        let b = bin_index(*c, num_bins);
        counts[b] += 1;
        sum_conf[b] += c;
        hits[b] += usize::from(*ok);
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = counts[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (sum_conf[b] / n as f64, hits[b] as f64 / n as f64)
            };
            EceBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

/// Expected calibration error, `sum_b (n_b / N) |acc_b - conf_b|` over
/// equal-width confidence bins.
pub fn ece(batch: &PredictionBatch, num_bins: usize) -> Result<f64, MetricError> {
    let n = batch.len() as f64;
    Ok(ece_bins(batch, num_bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// AUROC of `1 - max_k p_k` at separating incorrect (positive) from correct
/// predictions.
pub fn calibration_auroc(batch: &PredictionBatch) -> Result<f64, MetricError> {
    let incorrect: Vec<bool> = correctness(batch).into_iter().map(|c| !c).collect();
    binary_auroc(&batch.max_prob_uncertainty(), &incorrect)
}
