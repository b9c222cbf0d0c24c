use super::{MetricError, PredictionBatch, PROB_EPS};

/// Per-example correctness of the argmax prediction.
pub fn correctness(batch: &PredictionBatch) -> Vec<bool> {
    batch
        .predictions()
        .into_iter()
        .zip(batch.labels())
        .map(|(p, &l)| p == l)
        .collect()
}

pub fn accuracy(batch: &PredictionBatch) -> f64 {
    let hits = correctness(batch).into_iter().filter(|&c| c).count();
    hits as f64 / batch.len() as f64
}

/// Mean negative log-likelihood of the true label.
pub fn nll(batch: &PredictionBatch) -> f64 {
    let total: f64 = batch
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| -batch.row(i)[l].max(PROB_EPS).ln())
        .sum();
    total / batch.len() as f64
}

/// Mean over examples of `sum_k (p_k - 1[k = label])^2`.
pub fn brier(batch: &PredictionBatch) -> f64 {
    let total: f64 = batch
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            batch
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == l { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / batch.len() as f64
}

/// Mean `KL(p_data || p_model)` against the batch's soft labels.
///
/// Model probabilities are clamped to [`PROB_EPS`]; entries with
/// `p_data = 0` contribute nothing.
pub fn label_uncertainty_kl(batch: &PredictionBatch) -> Result<f64, MetricError> {
    let soft = batch
        .soft_labels()
        .ok_or_else(|| MetricError::Invalid("label-uncertainty KL needs soft labels".into()))?;
    let total: f64 = soft
        .rows()
        .into_iter()
        .zip(batch.probs().rows())
        .map(|(p, q)| {
            p.iter()
                .zip(q.iter())
                .filter(|(&pd, _)| pd > 0.0)
                .map(|(&pd, &pm)| pd * (pd.ln() - pm.max(PROB_EPS).ln()))
                .sum::<f64>()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn perfect_predictions() {
        let b = PredictionBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        assert_eq!(accuracy(&b), 1.0);
        assert_eq!(nll(&b), 0.0);
        assert_eq!(brier(&b), 0.0);
    }

    #[test]
    fn three_of_four() {
        let b = PredictionBatch::new(
            array![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.6, 0.4]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        assert_eq!(accuracy(&b), 0.75);
    }

    #[test]
    fn tied_row_counts_as_class_zero() {
        let b = PredictionBatch::new(array![[0.5, 0.5]], vec![1]).unwrap();
        assert_eq!(accuracy(&b), 0.0);
    }

    #[test]
    fn uniform_nll_is_log_k() {
        let b = PredictionBatch::new(Array2::from_elem((3, 10), 0.1), vec![0, 4, 9]).unwrap();
        assert!((nll(&b) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn brier_arithmetic() {
        let b = PredictionBatch::new(array![[0.8, 0.2]], vec![0]).unwrap();
        assert!((brier(&b) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_when_matching() {
        let p = array![[0.3, 0.7], [0.5, 0.5]];
        let b = PredictionBatch::new(p.clone(), vec![1, 0])
            .unwrap()
            .with_soft_labels(p)
            .unwrap();
        assert_eq!(label_uncertainty_kl(&b).unwrap(), 0.0);
    }

    #[test]
    fn kl_against_direct_sum() {
        let b = PredictionBatch::new(array![[0.9, 0.1]], vec![0])
            .unwrap()
            .with_soft_labels(array![[0.5, 0.5]])
            .unwrap();
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((label_uncertainty_kl(&b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.510_825_623_765_990_7).abs() < 1e-15);
    }

    #[test]
    fn kl_clamps_zero_model_mass() {
        let b = PredictionBatch::new(array![[1.0, 0.0]], vec![0])
            .unwrap()
            .with_soft_labels(array![[0.5, 0.5]])
            .unwrap();
        let kl = label_uncertainty_kl(&b).unwrap();
        assert!(kl.is_finite());
        assert!(kl > 10.0);
    }

    #[test]
    fn kl_requires_soft_labels() {
        let b = PredictionBatch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert!(label_uncertainty_kl(&b).is_err());
    }
}
