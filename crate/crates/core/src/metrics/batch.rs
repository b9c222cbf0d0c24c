use ndarray::{Array2, ArrayView1};

use super::{MetricError, PROB_ROW_TOL};
use crate::linalg::argmax;

/// Predicted class probabilities with their labels.
///
/// `probs` is `[N x K]` with non-negative rows summing to one within
/// [`PROB_ROW_TOL`]. Optional soft labels (`[N x K]`) and subpopulation ids
/// (`[N]`) ride along for the metrics that need them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Array2<f64>,
    labels: Vec<usize>,
    soft_labels: Option<Array2<f64>>,
    groups: Option<Vec<u32>>,
}

impl PredictionBatch {
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self, MetricError> {
        let (n, k) = probs.dim();
        if n == 0 {
            return Err(MetricError::Invalid("empty batch".into()));
        }
        if labels.len() != n {
            return Err(MetricError::Invalid(format!(
                "{n} probability rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(MetricError::Invalid(format!("label {l} outside [0, {k})")));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(MetricError::Invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > PROB_ROW_TOL {
                return Err(MetricError::Invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self {
            probs,
            labels,
            soft_labels: None,
            groups: None,
        })
    }

    pub fn with_soft_labels(mut self, soft: Array2<f64>) -> Result<Self, MetricError> {
        if soft.dim() != self.probs.dim() {
            return Err(MetricError::Invalid(format!(
                "soft labels {:?} do not match probs {:?}",
                soft.dim(),
                self.probs.dim()
            )));
        }
        self.soft_labels = Some(soft);
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<u32>) -> Result<Self, MetricError> {
        if groups.len() != self.len() {
            return Err(MetricError::Invalid(format!(
                "{} groups for {} examples",
                groups.len(),
                self.len()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn soft_labels(&self) -> Option<&Array2<f64>> {
        self.soft_labels.as_ref()
    }

    pub fn groups(&self) -> Option<&[u32]> {
        self.groups.as_deref()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.probs.row(i)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(argmax).collect()
    }

    /// Max-probability confidence per example.
    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| r.fold(0.0f64, |a, &b| a.max(b)))
            .collect()
    }

    /// `1 - max_k p_k` per example.
    pub fn max_prob_uncertainty(&self) -> Vec<f64> {
        self.confidences().into_iter().map(|c| 1.0 - c).collect()
    }

    /// Sub-batch with the given example indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let probs = self.probs.select(ndarray::Axis(0), idx);
        Self {
            probs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            soft_labels: self
                .soft_labels
                .as_ref()
                .map(|s| s.select(ndarray::Axis(0), idx)),
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_rows() {
        assert!(PredictionBatch::new(array![[0.6, 0.6]], vec![0]).is_err());
        assert!(PredictionBatch::new(array![[1.1, -0.1]], vec![0]).is_err());
        assert!(PredictionBatch::new(array![[0.5, 0.5]], vec![2]).is_err());
        assert!(PredictionBatch::new(Array2::zeros((0, 2)), vec![]).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let b = PredictionBatch::new(array![[0.5, 0.5]], vec![1]).unwrap();
        assert_eq!(b.predictions(), vec![0]);
    }
}
