//! Metric records and the normalized 0-100 reliability score.

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const NORMALIZED_MAX: f64 = 100.0;

/// Values may sit this far outside their bounds before they count as an error.
const BOUND_SLACK: f64 = 1e-9;

/// Orientation and bounds of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub higher_is_better: bool,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

impl MetricSpec {
    pub fn new(higher_is_better: bool, lower_bound: f64, upper_bound: f64) -> Self {
        assert!(
            lower_bound < upper_bound,
            "metric bounds must satisfy lower < upper ({lower_bound} >= {upper_bound})"
        );
        Self {
            higher_is_better,
            lower_bound,
            upper_bound,
        }
    }

    /// Accuracy, AUROC, AUPRC and other `[0, 1]` higher-is-better metrics.
    pub fn unit_higher() -> Self {
        Self::new(true, 0.0, 1.0)
    }

    /// ECE-style `[0, 1]` lower-is-better metrics (scored as `100 - 100 ECE`).
    pub fn unit_lower() -> Self {
        Self::new(false, 0.0, 1.0)
    }

    /// NLL, bounded above by the uniform predictor's `ln K`.
    pub fn nll(num_classes: usize) -> Self {
        Self::new(false, 0.0, (num_classes as f64).ln())
    }

    pub fn brier() -> Self {
        Self::new(false, 0.0, 2.0)
    }

    /// Label-uncertainty KL, bounded like NLL by `ln K`.
    pub fn kl(num_classes: usize) -> Self {
        Self::nll(num_classes)
    }
}

/// One metric value with the context needed to normalize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub higher_is_better: bool,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Set when `value` fell outside the bounds at construction; the value is
    /// stored verbatim and clamped only when normalizing.
    #[serde(default)]
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricRecord {
    pub fn new(
        task: impl Into<String>,
        dataset: impl Into<String>,
        split: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
        spec: MetricSpec,
    ) -> Self {
        let clamped = value < spec.lower_bound || value > spec.upper_bound;
        Self {
            task: task.into(),
            dataset: dataset.into(),
            split: split.into(),
            metric: metric.into(),
            value,
            higher_is_better: spec.higher_is_better,
            lower_bound: spec.lower_bound,
            upper_bound: spec.upper_bound,
            clamped,
            flags: Vec::new(),
        }
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> Self {
        let flag = flag.into();
        if !self.flags.contains(&flag) {
            self.flags.push(flag);
        }
        self
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// Affine map onto `[0, 100]`, flipped for lower-is-better metrics.
    ///
    /// Out-of-bounds values are clamped when the record carries the clamp
    /// flag or misses its bounds by at most 1e-9; anything else is an error.
    pub fn normalized(&self) -> Result<f64, MetricError> {
        let (lo, hi) = (self.lower_bound, self.upper_bound);
        if !(lo < hi) || !self.value.is_finite() {
            return Err(MetricError::Invalid(format!(
                "record {:?} has bounds [{lo}, {hi}] and value {}",
                self.metric, self.value
            )));
        }
        let outside = self.value < lo - BOUND_SLACK || self.value > hi + BOUND_SLACK;
        if outside && !self.clamped {
            return Err(MetricError::OutOfBounds {
                metric: self.metric.clone(),
                value: self.value,
                lower: lo,
                upper: hi,
            });
        }
        let v = self.value.clamp(lo, hi);
        let frac = if self.higher_is_better {
            (v - lo) / (hi - lo)
        } else {
            (hi - v) / (hi - lo)
        };
        Ok(NORMALIZED_MAX * frac)
    }
}

/// Unweighted mean of normalized record values.
///
/// Normalized values are summed in sorted order so the result does not
/// depend on record order, bit for bit.
pub fn reliability_score(records: &[MetricRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Invalid("no records to score".into()));
    }
    let mut values = records
        .iter()
        .map(MetricRecord::normalized)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sorted_mean(&mut values))
}

pub(crate) fn sorted_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(metric: &str, value: f64, spec: MetricSpec) -> MetricRecord {
        MetricRecord::new("t", "d", "test", metric, value, spec)
    }

    #[test]
    fn best_bounds_score_100() {
        let rs = vec![
            rec("accuracy", 1.0, MetricSpec::unit_higher()),
            rec("ece", 0.0, MetricSpec::unit_lower()),
            rec("nll", 0.0, MetricSpec::nll(10)),
            rec("brier", 0.0, MetricSpec::brier()),
        ];
        assert_eq!(reliability_score(&rs).unwrap(), 100.0);
    }

    #[test]
    fn uniform_nll_scores_zero() {
        let r = rec("nll", 10f64.ln(), MetricSpec::nll(10));
        assert_eq!(r.normalized().unwrap(), 0.0);
    }

    #[test]
    fn accuracy_and_normalized_nll_average() {
        let k = 10;
        let nll = 0.4 * (k as f64).ln();
        let rs = vec![
            rec("accuracy", 0.8, MetricSpec::unit_higher()),
            rec("nll", nll, MetricSpec::nll(k)),
        ];
        assert!((rs[1].normalized().unwrap() - 60.0).abs() < 1e-12);
        assert!((reliability_score(&rs).unwrap() - 70.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_error_unless_flagged() {
        let mut r = rec("acc", 0.5, MetricSpec::unit_higher());
        r.value = 1.2;
        assert!(matches!(r.normalized(), Err(MetricError::OutOfBounds { .. })));
        r.value = 1.0 + 1e-12;
        assert_eq!(r.normalized().unwrap(), 100.0);
        let worse_than_uniform = rec("nll", 3.0, MetricSpec::nll(10));
        assert!(worse_than_uniform.clamped);
        assert_eq!(worse_than_uniform.normalized().unwrap(), 0.0);
    }

    #[test]
    fn ece_orientation() {
        let r = rec("ece", 0.03, MetricSpec::unit_lower());
        assert!((r.normalized().unwrap() - 97.0).abs() < 1e-12);
    }

    #[test]
    fn affine_reexpression_is_invariant() {
        let a = rec("acc", 0.83, MetricSpec::unit_higher());
        let b = rec("acc_pct", 83.0, MetricSpec::new(true, 0.0, 100.0));
        assert!((a.normalized().unwrap() - b.normalized().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        assert!(reliability_score(&[]).is_err());
    }
}
