use std::collections::BTreeMap;

use super::{correctness, MetricError, PredictionBatch};

/// Accuracy within each subpopulation id.
pub fn per_group_accuracy(batch: &PredictionBatch) -> Result<BTreeMap<u32, f64>, MetricError> {
    let groups = batch
        .groups()
        .ok_or_else(|| MetricError::Invalid("batch carries no group ids".into()))?;
    let mut tallies: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&g, ok) in groups.iter().zip(correctness(batch)) {
        let t = tallies.entry(g).or_default();
        t.0 += usize::from(ok);
        t.1 += 1;
    }
    Ok(tallies
        .into_iter()
        .map(|(g, (hits, n))| (g, hits as f64 / n as f64))
        .collect())
}

/// Linear-interpolation percentiles (in `[0, 100]`) over the sorted
/// per-group values: position `p / 100 * (n - 1)`.
pub fn subpopulation_percentiles(
    per_group: &BTreeMap<u32, f64>,
    percentiles: &[f64],
) -> Result<Vec<(f64, f64)>, MetricError> {
    if per_group.is_empty() {
        return Err(MetricError::Invalid("no groups".into()));
    }
    let mut values: Vec<f64> = per_group.values().copied().collect();
    values.sort_by(f64::total_cmp);
    percentiles
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(MetricError::Invalid(format!("percentile {p} outside [0, 100]")));
            }
            let pos = p / 100.0 * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            Ok((p, values[lo] + frac * (values[hi] - values[lo])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(values: &[f64]) -> BTreeMap<u32, f64> {
        values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect()
    }

    #[test]
    fn constant_groups() {
        let out = subpopulation_percentiles(&groups(&[0.7; 4]), &[5.0, 50.0, 95.0]).unwrap();
        assert!(out.iter().all(|&(_, v)| v == 0.7));
    }

    #[test]
    fn median_of_five() {
        let out = subpopulation_percentiles(&groups(&[1.0, 0.4, 0.8, 0.2, 0.6]), &[50.0]).unwrap();
        assert_eq!(out[0].1, 0.6);
    }

    #[test]
    fn seven_uneven_groups_25th() {
        let g = groups(&[0.91, 0.35, 0.62, 0.80, 0.12, 0.55, 0.77]);
        // sorted: .12 .35 .55 .62 .77 .80 .91; pos = 0.25 * 6 = 1.5
        // -> .35 + .5 (.55 - .35) = 0.45
        let out = subpopulation_percentiles(&g, &[25.0]).unwrap();
        assert!((out[0].1 - 0.45).abs() < 1e-15);
    }

    #[test]
    fn empty_is_error() {
        assert!(subpopulation_percentiles(&BTreeMap::new(), &[50.0]).is_err());
    }
}
