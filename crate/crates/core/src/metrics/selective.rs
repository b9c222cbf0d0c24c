//! Selective prediction: oracle referral and rejection-rate curves.

use serde::{Deserialize, Serialize};

use super::{
    accuracy, binary_auprc, binary_auroc, correctness, fraction_count, CurvePoint, MetricError,
    PredictionBatch,
};

/// Example indices from most to least uncertain; equal uncertainties keep
/// ascending index order.
pub fn referral_order(uncertainty: &[f64]) -> Result<Vec<usize>, MetricError> {
    if uncertainty.iter().any(|u| u.is_nan()) {
        return Err(MetricError::Invalid("NaN uncertainty".into()));
    }
    let mut order: Vec<usize> = (0..uncertainty.len()).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    Ok(order)
}

fn check_aligned(batch: &PredictionBatch, uncertainty: &[f64]) -> Result<(), MetricError> {
    if uncertainty.len() != batch.len() {
        return Err(MetricError::Invalid(format!(
            "{} uncertainties for {} examples",
            uncertainty.len(),
            batch.len()
        )));
    }
    Ok(())
}

fn check_budget(budget: f64) -> Result<(), MetricError> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(MetricError::Invalid(format!("budget {budget} outside [0, 1]")));
    }
    Ok(())
}

/// Accuracy after the `floor(budget * N)` most uncertain predictions are sent
/// to an oracle that always answers correctly.
pub fn oracle_collaborative_accuracy(
    batch: &PredictionBatch,
    uncertainty: &[f64],
    budget: f64,
) -> Result<f64, MetricError> {
    check_aligned(batch, uncertainty)?;
    check_budget(budget)?;
    let order = referral_order(uncertainty)?;
    let referred = fraction_count(budget, batch.len());
    let correct = correctness(batch);
    let hits = referred + order[referred..].iter().filter(|&&i| correct[i]).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Binary-task AUROC after referral: referred examples have their
/// positive-class score replaced by the oracle's answer (1 for class 1,
/// 0 for class 0); the remainder keep `p(class 1)`.
pub fn oracle_collaborative_auroc(
    batch: &PredictionBatch,
    uncertainty: &[f64],
    budget: f64,
) -> Result<f64, MetricError> {
    check_aligned(batch, uncertainty)?;
    check_budget(budget)?;
    if batch.num_classes() != 2 {
        return Err(MetricError::Invalid(
            "oracle-collaborative AUROC is defined for binary tasks".into(),
        ));
    }
    let order = referral_order(uncertainty)?;
    let referred = fraction_count(budget, batch.len());
    let positives: Vec<bool> = batch.labels().iter().map(|&l| l == 1).collect();
    let mut scores: Vec<f64> = (0..batch.len()).map(|i| batch.row(i)[1]).collect();
    for &i in &order[..referred] {
        scores[i] = if positives[i] { 1.0 } else { 0.0 };
    }
    binary_auroc(&scores, &positives)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionMetric {
    Accuracy,
    /// Binary tasks: AUROC of `p(class 1)` against `label == 1`.
    Auroc,
    /// Binary tasks: average precision of `p(class 1)` against `label == 1`.
    Auprc,
}

impl RejectionMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectionMetric::Accuracy => "accuracy",
            RejectionMetric::Auroc => "auroc",
            RejectionMetric::Auprc => "auprc",
        }
    }

    fn evaluate(self, batch: &PredictionBatch) -> Result<f64, MetricError> {
        match self {
            RejectionMetric::Accuracy => Ok(accuracy(batch)),
            RejectionMetric::Auroc | RejectionMetric::Auprc => {
                let scores: Vec<f64> = (0..batch.len()).map(|i| batch.row(i)[1]).collect();
                let pos: Vec<bool> = batch.labels().iter().map(|&l| l == 1).collect();
                if self == RejectionMetric::Auroc {
                    binary_auroc(&scores, &pos)
                } else {
                    binary_auprc(&scores, &pos)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub metric: RejectionMetric,
    pub points: Vec<CurvePoint>,
    /// Rates whose retained set was degenerate for the metric.
    pub omitted: Vec<f64>,
}

/// Evaluates `metric` on the examples retained after rejecting the
/// `floor(rate * N)` most uncertain ones, for each rate.
///
/// Rates must be strictly increasing within `[0, 0.99]`.
pub fn rejection_curve(
    batch: &PredictionBatch,
    uncertainty: &[f64],
    metric: RejectionMetric,
    rates: &[f64],
) -> Result<RejectionCurve, MetricError> {
    check_aligned(batch, uncertainty)?;
    if rates.is_empty() {
        return Err(MetricError::Invalid("no rejection rates".into()));
    }
    if rates.iter().any(|r| !(0.0..=0.99).contains(r)) {
        return Err(MetricError::Invalid("rejection rates must lie in [0, 0.99]".into()));
    }
    if rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricError::Invalid("rejection rates must be strictly increasing".into()));
    }
    if metric != RejectionMetric::Accuracy && batch.num_classes() != 2 {
        return Err(MetricError::Invalid(format!(
            "{} rejection curves need a binary task",
            metric.as_str()
        )));
    }
    let order = referral_order(uncertainty)?;
    let mut points = Vec::with_capacity(rates.len());
    let mut omitted = Vec::new();
    for &rate in rates {
        let rejected = fraction_count(rate, batch.len());
        let mut kept = order[rejected..].to_vec();
        kept.sort_unstable();
        match metric.evaluate(&batch.select(&kept)) {
            Ok(y) => points.push(CurvePoint { x: rate, y }),
            Err(MetricError::Degenerate(_)) => omitted.push(rate),
            Err(e) => return Err(e),
        }
    }
    Ok(RejectionCurve {
        metric,
        points,
        omitted,
    })
}

/// Trapezoid-rule area under a curve over its x range.
pub fn rejection_auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[1].x - w[0].x) * (w[0].y + w[1].y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn batch(conf: &[f64], correct: &[bool]) -> PredictionBatch {
        let mut probs = Array2::zeros((conf.len(), 2));
        for (i, &c) in conf.iter().enumerate() {
            probs[[i, 0]] = c;
            probs[[i, 1]] = 1.0 - c;
        }
        let labels = correct.iter().map(|&ok| if ok { 0 } else { 1 }).collect();
        PredictionBatch::new(probs, labels).unwrap()
    }

    #[test]
    fn budget_extremes() {
        let b = batch(&[0.9, 0.6, 0.7, 0.8], &[true, false, false, true]);
        let u = b.max_prob_uncertainty();
        assert_eq!(oracle_collaborative_accuracy(&b, &u, 1.0).unwrap(), 1.0);
        assert_eq!(oracle_collaborative_accuracy(&b, &u, 0.0).unwrap(), 0.5);
        assert!(oracle_collaborative_accuracy(&b, &u, 1.5).is_err());
    }

    #[test]
    fn ten_examples_budget_point_two() {
        // Two referrals. Uncertainties tie at 0.9 for indices 3 and 7, both
        // above everything else; index 5 (0.8) is next and stays unreferred.
        let u = [0.1, 0.2, 0.3, 0.9, 0.4, 0.8, 0.5, 0.9, 0.05, 0.6];
        let correct = [true, true, false, false, true, false, true, false, true, true];
        let b = batch(&[0.9; 10], &correct);
        // Exhaustive: referred {3, 7} become correct; remaining correct are
        // 0,1,4,6,8,9 -> 6. Total 8 / 10.
        let mut referred = vec![false; 10];
        let mut idx: Vec<usize> = (0..10).collect();
        idx.sort_by(|&a, &c| u[c].partial_cmp(&u[a]).unwrap().then(a.cmp(&c)));
        for &i in &idx[..2] {
            referred[i] = true;
        }
        let oracle = (0..10).filter(|&i| referred[i] || correct[i]).count() as f64 / 10.0;
        assert_eq!(oracle, 0.8);
        assert_eq!(oracle_collaborative_accuracy(&b, &u, 0.2).unwrap(), oracle);
    }

    #[test]
    fn referral_ties_go_to_lowest_index() {
        assert_eq!(referral_order(&[0.5, 0.9, 0.9, 0.1]).unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn curve_at_zero_equals_full_metric() {
        let b = batch(&[0.9, 0.6, 0.7, 0.8], &[true, false, false, true]);
        let u = b.max_prob_uncertainty();
        let c = rejection_curve(&b, &u, RejectionMetric::Accuracy, &[0.0, 0.5]).unwrap();
        assert_eq!(c.points[0].y, accuracy(&b));
        assert_eq!(c.points[1].y, 1.0);
    }

    #[test]
    fn oracle_uncertainty_reaches_one_after_error_rate() {
        let correct = [true, false, true, true, false, true, true, true];
        let b = batch(&[0.8; 8], &correct);
        let u: Vec<f64> = correct.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
        let rates = [0.0, 0.25, 0.5, 0.75];
        let c = rejection_curve(&b, &u, RejectionMetric::Accuracy, &rates).unwrap();
        assert_eq!(c.points[0].y, 0.75);
        assert!(c.points[1..].iter().all(|p| p.y == 1.0));
    }

    #[test]
    fn eight_example_exhaustive_curve() {
        let correct = [true, false, false, true, true, false, true, true];
        let u = [0.2, 0.7, 0.1, 0.3, 0.9, 0.4, 0.2, 0.05];
        let b = batch(&[0.8; 8], &correct);
        // tau = 0: 5/8. tau = 0.25 rejects {4 (0.9), 1 (0.7)}: retained
        // correct {0,3,6,7} of 6 -> 4/6. tau = 0.5 additionally rejects
        // {5 (0.4), 3 (0.3)}: retained {0,2,6,7} -> 3/4.
        let c = rejection_curve(&b, &u, RejectionMetric::Accuracy, &[0.0, 0.25, 0.5]).unwrap();
        let ys: Vec<f64> = c.points.iter().map(|p| p.y).collect();
        assert_eq!(ys, vec![5.0 / 8.0, 4.0 / 6.0, 3.0 / 4.0]);
        let auc = rejection_auc(&c.points);
        let expected = 0.125 * (5.0 / 8.0 + 4.0 / 6.0) + 0.125 * (4.0 / 6.0 + 3.0 / 4.0);
        assert!((auc - expected).abs() < 1e-15);
    }

    #[test]
    fn degenerate_auroc_points_are_omitted() {
        // After rejecting the single negative, AUROC is undefined.
        let b = PredictionBatch::new(
            ndarray::array![[0.2, 0.8], [0.3, 0.7], [0.9, 0.1]],
            vec![1, 1, 0],
        )
        .unwrap();
        let u = [0.0, 0.1, 0.9];
        let c = rejection_curve(&b, &u, RejectionMetric::Auroc, &[0.0, 0.34]).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.omitted, vec![0.34]);
    }

    #[test]
    fn invalid_rates_rejected() {
        let b = batch(&[0.9, 0.6], &[true, false]);
        let u = [0.1, 0.4];
        assert!(rejection_curve(&b, &u, RejectionMetric::Accuracy, &[0.5, 0.2]).is_err());
        assert!(rejection_curve(&b, &u, RejectionMetric::Accuracy, &[1.0]).is_err());
    }

    #[test]
    fn oc_auroc_full_budget_is_perfect() {
        let b = PredictionBatch::new(
            ndarray::array![[0.2, 0.8], [0.7, 0.3], [0.4, 0.6], [0.6, 0.4]],
            vec![0, 1, 1, 0],
        )
        .unwrap();
        let u = b.max_prob_uncertainty();
        assert_eq!(oracle_collaborative_auroc(&b, &u, 1.0).unwrap(), 1.0);
        // No referral: plain AUROC of p1 = (0.8, 0.3, 0.6, 0.4) vs (0,1,1,0):
        // positives 0.3, 0.6 vs negatives 0.8, 0.4 -> 1 win of 4.
        assert_eq!(oracle_collaborative_auroc(&b, &u, 0.0).unwrap(), 0.25);
    }
}
