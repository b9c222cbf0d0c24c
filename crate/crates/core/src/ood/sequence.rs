use ndarray::{Array2, Axis};

use super::{entropy_score, OodError};
use crate::metrics::PROB_ROW_TOL;

/// Per-step conditional distributions `p(y_l | y_<l, x)` of one output
/// sequence. Rows past `length` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    step_probs: Array2<f64>,
    length: usize,
}

impl SequenceDistribution {
    pub fn new(step_probs: Array2<f64>, length: usize) -> Result<Self, OodError> {
        if length == 0 || length > step_probs.nrows() {
            return Err(OodError::Invalid(format!(
                "effective length {length} outside [1, {}]",
                step_probs.nrows()
            )));
        }
        for (l, row) in step_probs.axis_iter(Axis(0)).take(length).enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > PROB_ROW_TOL || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(OodError::Invalid(format!("step {l} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { step_probs, length })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn step_probs(&self) -> &Array2<f64> {
        &self.step_probs
    }
}

/// Mean per-step conditional entropy over the effective length.
///
/// Larger means more uncertain, so it ranks like the other OOD scores.
pub fn sequence_entropy_score(seq: &SequenceDistribution) -> f64 {
    let total: f64 = seq
        .step_probs
        .axis_iter(Axis(0))
        .take(seq.length)
        .map(entropy_score)
        .sum();
    total / seq.length as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn deterministic_steps_score_zero() {
        let s = SequenceDistribution::new(array![[1.0, 0.0], [0.0, 1.0]], 2).unwrap();
        assert_eq!(sequence_entropy_score(&s), 0.0);
    }

    #[test]
    fn uniform_steps_score_log_k() {
        let s = SequenceDistribution::new(Array2::from_elem((4, 3), 1.0 / 3.0), 4).unwrap();
        assert!((sequence_entropy_score(&s) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mixed_steps_average() {
        let rows = array![[0.5, 0.5, 0.0], [0.7, 0.2, 0.1], [1.0, 0.0, 0.0], [0.2, 0.2, 0.6]];
        let s = SequenceDistribution::new(rows, 3).unwrap();
        let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
        let expected = (h(&[0.5, 0.5]) + h(&[0.7, 0.2, 0.1]) + 0.0) / 3.0;
        assert!((sequence_entropy_score(&s) - expected).abs() < 1e-15);
    }

    #[test]
    fn length_one_equals_row_entropy() {
        let row = array![0.1, 0.3, 0.6];
        let s = SequenceDistribution::new(row.clone().insert_axis(Axis(0)), 1).unwrap();
        assert_eq!(sequence_entropy_score(&s), entropy_score(row.view()));
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(SequenceDistribution::new(array![[1.0, 0.0]], 0).is_err());
        assert!(SequenceDistribution::new(array![[1.0, 0.0]], 2).is_err());
    }
}
