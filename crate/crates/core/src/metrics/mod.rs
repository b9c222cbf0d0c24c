//! Scalar reliability metrics, selective-prediction curves and the
//! normalized reliability-score aggregator.
//!
//! Conventions shared by every function here:
//! - argmax ties go to the lowest class index;
//! - referral / rejection ties go to the lowest example index;
//! - probabilities are clamped to [`PROB_EPS`] before taking logs.

mod batch;
mod calibration;
mod ranking;
mod record;
mod scoring;
mod selective;
mod subpop;

pub use batch::PredictionBatch;
pub use calibration::{calibration_auroc, ece, ece_bins, EceBin, DEFAULT_ECE_BINS};
pub use ranking::{binary_auprc, binary_auroc};
pub use record::{reliability_score, MetricRecord, MetricSpec, NORMALIZED_MAX};
pub use scoring::{accuracy, brier, correctness, label_uncertainty_kl, nll};
pub use selective::{
    oracle_collaborative_accuracy, oracle_collaborative_auroc, referral_order, rejection_auc,
    rejection_curve, RejectionCurve, RejectionMetric,
};
pub use subpop::{per_group_accuracy, subpopulation_percentiles};

use serde::{Deserialize, Serialize};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on probability row sums.
pub const PROB_ROW_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("value {value} of metric {metric:?} lies outside [{lower}, {upper}]")]
    OutOfBounds {
        metric: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

/// Number of examples selected by a fraction of `n`, i.e. `floor(fraction * n)`.
///
/// A 1e-9 slack absorbs products such as `0.29 * 100 = 28.999999999999996`.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    let c = (fraction * n as f64 + 1e-9).floor() as usize;
    c.min(n)
}

#[cfg(test)]
mod tests {
    use super::fraction_count;

    #[test]
    fn fraction_count_absorbs_rounding() {
        assert_eq!(fraction_count(0.29, 100), 29);
        assert_eq!(fraction_count(0.2, 10), 2);
        assert_eq!(fraction_count(0.0, 10), 0);
        assert_eq!(fraction_count(1.0, 7), 7);
        assert_eq!(fraction_count(0.99, 5), 4);
    }
}
