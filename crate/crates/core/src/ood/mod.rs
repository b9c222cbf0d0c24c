//! Per-example uncertainty scores for open-set recognition. Every score is
//! oriented so that larger means "more likely out-of-distribution".

mod mahalanobis;
mod sequence;

pub use mahalanobis::{fit_class_gaussians, GaussianClassModel, Ridge};
pub use sequence::{sequence_entropy_score, SequenceDistribution};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::linalg::NotPositiveDefinite;
use crate::metrics::{binary_auprc, binary_auroc, MetricError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OodError {
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("covariance is not positive definite after regularization: {0}")]
    NotPositiveDefinite(#[from] NotPositiveDefinite),
    #[error("dimension mismatch: model expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// `1 - max_k p_k`.
pub fn msp_score(probs: ArrayView1<f64>) -> f64 {
    1.0 - probs.fold(0.0f64, |a, &b| a.max(b))
}

/// Shannon entropy `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy_score(probs: ArrayView1<f64>) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Negative maximum logit.
pub fn maxlogit_score(logits: ArrayView1<f64>) -> f64 {
    -logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrResult {
    pub auroc: f64,
    pub auprc: f64,
}

/// AUROC / AUPRC with the out-of-distribution scores as the positive class.
pub fn osr_evaluate(in_scores: &[f64], out_scores: &[f64]) -> Result<OsrResult, OodError> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(OodError::Invalid(format!(
            "need non-empty score sets, got {} in-distribution and {} OOD",
            in_scores.len(),
            out_scores.len()
        )));
    }
    let scores: Vec<f64> = in_scores.iter().chain(out_scores).copied().collect();
    let positives: Vec<bool> = std::iter::repeat_n(false, in_scores.len())
        .chain(std::iter::repeat_n(true, out_scores.len()))
        .collect();
    Ok(OsrResult {
        auroc: binary_auroc(&scores, &positives)?,
        auprc: binary_auprc(&scores, &positives)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn msp_cases() {
        assert_eq!(msp_score(array![0.0, 1.0, 0.0].view()), 0.0);
        assert_eq!(msp_score(Array1::from_elem(4, 0.25).view()), 0.75);
        assert!((msp_score(array![0.6, 0.3, 0.1].view()) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy_score(array![1.0, 0.0].view()), 0.0);
        assert!((entropy_score(Array1::from_elem(5, 0.2).view()) - 5f64.ln()).abs() < 1e-15);
        // -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2
        let h = entropy_score(array![0.5, 0.25, 0.25].view());
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn maxlogit_cases() {
        assert_eq!(maxlogit_score(array![3.0, 1.0, 0.0].view()), -3.0);
        let shifted = maxlogit_score(array![5.5, 3.5, 2.5].view());
        assert_eq!(shifted, -3.0 - 2.5);
    }

    #[test]
    fn class_permutation_invariance() {
        let p = array![0.1, 0.6, 0.3];
        let q = array![0.3, 0.1, 0.6];
        assert_eq!(msp_score(p.view()), msp_score(q.view()));
        assert!((entropy_score(p.view()) - entropy_score(q.view())).abs() < 1e-15);
        assert_eq!(maxlogit_score(p.view()), maxlogit_score(q.view()));
    }

    #[test]
    fn osr_cases() {
        let r = osr_evaluate(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!((r.auroc, r.auprc), (1.0, 1.0));
        let r = osr_evaluate(&[0.5; 3], &[0.5; 3]).unwrap();
        assert_eq!(r.auroc, 0.5);
        assert!(osr_evaluate(&[], &[1.0]).is_err());
    }

    #[test]
    fn osr_six_scores_pairwise() {
        let ins = [0.2, 0.5, 0.7];
        let outs = [0.6, 0.5, 0.9];
        let mut wins = 0.0;
        for o in outs {
            for i in ins {
                wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        assert_eq!(wins / 9.0, 6.5 / 9.0);
        assert_eq!(osr_evaluate(&ins, &outs).unwrap().auroc, 6.5 / 9.0);
    }
}
