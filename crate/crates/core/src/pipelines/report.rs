//! Reports, their on-disk form, and reliability-score aggregation.
//!
//! Every float written to disk is first rounded to 9 significant digits, and
//! records are ordered by `(task, dataset, split, metric)`, so identical runs
//! give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::metrics::{CurvePoint, MetricRecord};

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SCORE_FILE: &str = "score.json";

/// Flag for records that summarize spread and stay out of the score.
pub const DESCRIPTIVE: &str = "descriptive";
/// Flag on scores that average within each dataset before averaging datasets.
pub const WITHIN_DATASET_FIRST: &str = "within_dataset_first";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Area {
    Uncertainty,
    RobustGeneralization,
    Adaptation,
}

impl Area {
    pub const ALL: [Area; 3] = [Area::Uncertainty, Area::RobustGeneralization, Area::Adaptation];

    pub fn as_str(self) -> &'static str {
        match self {
            Area::Uncertainty => "uncertainty",
            Area::RobustGeneralization => "robust_generalization",
            Area::Adaptation => "adaptation",
        }
    }

    /// Area of a record's task name.
    pub fn of_task(task: &str) -> Option<Area> {
        match task {
            "calibration" | "selective" | "osr" | "label_uncertainty" => Some(Area::Uncertainty),
            "in_distribution" | "covariate_shift" | "subpopulation" => Some(Area::RobustGeneralization),
            "fewshot" | "zeroshot_osr" | "active_learning" => Some(Area::Adaptation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<CurvePoint>,
}

/// A task, or part of one, that did not run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Skip {
    pub task: String,
    pub dataset: String,
    pub split: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub dataset: String,
    pub kind: String,
    pub seed: u64,
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    /// Effective seeds per purpose.
    pub seeds: BTreeMap<String, Vec<u64>>,
    pub flags: Vec<String>,
    pub heads: Vec<HeadInfo>,
    pub skipped: Vec<Skip>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaScore {
    /// `None` when no record maps to the area.
    pub score: Option<f64>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub model: String,
    pub config_hash: String,
    pub overall: f64,
    pub areas: BTreeMap<Area, AreaScore>,
    pub datasets: BTreeMap<String, f64>,
    pub records: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub records: Vec<MetricRecord>,
    pub curves: BTreeMap<String, Curve>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreSummary>,
}

impl Report {
    pub fn new(model: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            model: model.into(),
            records: Vec::new(),
            curves: BTreeMap::new(),
            provenance,
            score: None,
        }
    }

    /// Sorts records and provenance lists into their canonical order.
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| {
            (&a.task, &a.dataset, &a.split, &a.metric).cmp(&(&b.task, &b.dataset, &b.split, &b.metric))
        });
        for r in &mut self.records {
            r.flags.sort();
            r.flags.dedup();
        }
        let p = &mut self.provenance;
        p.flags.sort();
        p.flags.dedup();
        p.skipped.sort();
        p.skipped.dedup();
        p.warnings.sort();
        p.warnings.dedup();
    }

    pub fn record(&self, task: &str, dataset: &str, split: &str, metric: &str) -> Option<&MetricRecord> {
        self.records
            .iter()
            .find(|r| r.task == task && r.dataset == dataset && r.split == split && r.metric == metric)
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_floats(&mut v);
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::invalid(format!("report: {e}")))
    }

    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "dataset", "split", "metric", "value"])
            .expect("in-memory write");
        for r in &self.records {
            w.write_record([&r.task, &r.dataset, &r.split, &r.metric, &fmt_float(r.value)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Writes `report.json`, `records.csv`, one CSV per curve under
    /// `curves/`, and `score.json` when a score is attached.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), self.to_json())?;
        fs::write(dir.join(RECORDS_FILE), self.records_csv())?;
        if !self.curves.is_empty() {
            let cdir = dir.join("curves");
            fs::create_dir_all(&cdir)?;
            for (name, curve) in &self.curves {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([&curve.x_label, &curve.y_label]).expect("in-memory write");
                for p in &curve.points {
                    w.write_record([fmt_float(p.x), fmt_float(p.y)]).expect("in-memory write");
                }
                let bytes = w.into_inner().expect("in-memory flush");
                fs::write(cdir.join(format!("{}.csv", name.replace('/', "__"))), bytes)?;
            }
        }
        if let Some(s) = &self.score {
            fs::write(dir.join(SCORE_FILE), score_json(s))?;
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

pub fn score_json(s: &ScoreSummary) -> String {
    let mut v = serde_json::to_value(s).expect("score serializes");
    round_floats(&mut v);
    serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
}

/// Rounds to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

pub fn fmt_float(v: f64) -> String {
    format!("{}", round_sig9(v))
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig9(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn mean_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Averages normalized values within each dataset, then across datasets.
fn dataset_first_mean(records: &[&MetricRecord]) -> Result<(f64, BTreeMap<String, f64>), PipelineError> {
    let mut by_ds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_ds.entry(r.dataset.clone()).or_default().push(r.normalized()?);
    }
    let per_ds: BTreeMap<String, f64> = by_ds.into_iter().map(|(d, v)| (d, mean_sorted(v))).collect();
    let overall = mean_sorted(per_ds.values().copied().collect());
    Ok((overall, per_ds))
}

/// Overall and per-area reliability scores over one or more reports of the
/// same model and configuration. Descriptive records are left out.
pub fn run_score(reports: &[Report]) -> Result<ScoreSummary, PipelineError> {
    let first = reports
        .first()
        .ok_or_else(|| PipelineError::invalid("no reports to score"))?;
    if let Some(r) = reports.iter().find(|r| r.provenance.config_hash != first.provenance.config_hash) {
        return Err(PipelineError::invalid(format!(
            "reports come from different configurations ({} vs {})",
            first.provenance.config_hash, r.provenance.config_hash
        )));
    }
    if let Some(r) = reports.iter().find(|r| r.model != first.model) {
        return Err(PipelineError::invalid(format!(
            "reports describe different models ({:?} vs {:?})",
            first.model, r.model
        )));
    }
    score_records(
        &first.model,
        &first.provenance.config_hash,
        reports.iter().flat_map(|r| &r.records),
    )
}

pub(crate) fn score_records<'a>(
    model: &str,
    config_hash: &str,
    records: impl IntoIterator<Item = &'a MetricRecord>,
) -> Result<ScoreSummary, PipelineError> {
    let mut recs: Vec<&MetricRecord> = records.into_iter().filter(|r| !r.has_flag(DESCRIPTIVE)).collect();
    recs.sort_by(|a, b| (&a.task, &a.dataset, &a.split, &a.metric).cmp(&(&b.task, &b.dataset, &b.split, &b.metric)));
    if let Some(w) = recs
        .windows(2)
        .find(|w| (&w[0].task, &w[0].dataset, &w[0].split, &w[0].metric) == (&w[1].task, &w[1].dataset, &w[1].split, &w[1].metric))
    {
        return Err(PipelineError::invalid(format!(
            "record ({}, {}, {}, {}) appears twice",
            w[0].task, w[0].dataset, w[0].split, w[0].metric
        )));
    }
    if recs.is_empty() {
        return Err(PipelineError::invalid("no scoreable records"));
    }
    let (overall, datasets) = dataset_first_mean(&recs)?;
    let mut flags = vec![WITHIN_DATASET_FIRST.to_string()];
    let mut areas = BTreeMap::new();
    for area in Area::ALL {
        let in_area: Vec<&MetricRecord> = recs
            .iter()
            .copied()
            .filter(|r| Area::of_task(&r.task) == Some(area))
            .collect();
        let score = if in_area.is_empty() {
            flags.push(format!("area_absent:{}", area.as_str()));
            None
        } else {
            Some(dataset_first_mean(&in_area)?.0)
        };
        areas.insert(
            area,
            AreaScore {
                score,
                records: in_area.len(),
            },
        );
    }
    let mut unmapped: Vec<&str> = recs
        .iter()
        .filter(|r| Area::of_task(&r.task).is_none())
        .map(|r| r.task.as_str())
        .collect();
    unmapped.dedup();
    flags.extend(unmapped.into_iter().map(|t| format!("unmapped_task:{t}")));
    if recs.iter().any(|r| r.clamped) {
        flags.push("clamped_records".into());
    }
    Ok(ScoreSummary {
        model: model.to_string(),
        config_hash: config_hash.to_string(),
        overall,
        areas,
        datasets,
        records: recs.len(),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricSpec;

    fn rec(task: &str, dataset: &str, metric: &str, value: f64, spec: MetricSpec) -> MetricRecord {
        MetricRecord::new(task, dataset, "test", metric, value, spec)
    }

    fn report(records: Vec<MetricRecord>) -> Report {
        let mut r = Report::new(
            "m",
            Provenance {
                config_hash: "h".into(),
                ..Default::default()
            },
        );
        r.records = records;
        r
    }

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(0.1 + 0.2), 0.3);
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(round_sig9(123456789.4), 123456789.0);
        assert_eq!(round_sig9(-2.0e-20 / 3.0), -6.66666667e-21);
        assert_eq!(round_sig9(0.0), 0.0);
        assert_eq!(fmt_float(1.0), "1");
    }

    #[test]
    fn perfect_records_score_100_in_every_area() {
        let r = report(vec![
            rec("in_distribution", "d", "accuracy", 1.0, MetricSpec::unit_higher()),
            rec("calibration", "d", "ece", 0.0, MetricSpec::unit_lower()),
            rec("fewshot", "d", "accuracy@1shot", 1.0, MetricSpec::unit_higher()),
        ]);
        let s = run_score(&[r]).unwrap();
        assert_eq!(s.overall, 100.0);
        assert!(s.areas.values().all(|a| a.score == Some(100.0)));
    }

    #[test]
    fn missing_areas_are_flagged() {
        let r = report(vec![rec("osr", "d", "msp.auroc", 0.9, MetricSpec::unit_higher())]);
        let s = run_score(&[r]).unwrap();
        assert_eq!(s.areas[&Area::Uncertainty].score, Some(90.0));
        assert_eq!(s.areas[&Area::Adaptation].score, None);
        assert!(s.flags.contains(&"area_absent:robust_generalization".to_string()));
        assert!(s.flags.contains(&"area_absent:adaptation".to_string()));
    }

    #[test]
    fn datasets_are_averaged_first() {
        let r = report(vec![
            rec("in_distribution", "a", "accuracy", 1.0, MetricSpec::unit_higher()),
            rec("in_distribution", "a", "nll", 0.0, MetricSpec::nll(10)),
            rec("in_distribution", "a", "brier", 0.0, MetricSpec::brier()),
            rec("in_distribution", "b", "accuracy", 0.0, MetricSpec::unit_higher()),
        ]);
        let s = run_score(&[r]).unwrap();
        assert_eq!(s.overall, 50.0);
        assert_eq!(s.datasets["a"], 100.0);
    }

    #[test]
    fn descriptive_records_are_ignored_and_duplicates_refused() {
        let good = rec("fewshot", "d", "accuracy@1shot", 0.5, MetricSpec::unit_higher());
        let std = rec("fewshot", "d", "accuracy@1shot.std", 0.1, MetricSpec::unit_higher()).with_flag(DESCRIPTIVE);
        let s = run_score(&[report(vec![good.clone(), std])]).unwrap();
        assert_eq!((s.overall, s.records), (50.0, 1));
        assert!(run_score(&[report(vec![good.clone()]), report(vec![good])]).is_err());
    }

    #[test]
    fn mixed_hashes_are_refused() {
        let a = report(vec![rec("osr", "d", "x", 0.5, MetricSpec::unit_higher())]);
        let mut b = a.clone();
        b.provenance.config_hash = "other".into();
        b.records[0].metric = "y".into();
        assert!(run_score(&[a.clone(), b]).is_err());
        assert!(run_score(&[]).is_err());
    }

    #[test]
    fn json_and_csv_are_canonical() {
        let mut r = report(vec![
            rec("osr", "d", "b", 1.0 / 3.0, MetricSpec::unit_higher()),
            rec("calibration", "d", "a", 0.1 + 0.2, MetricSpec::unit_lower()),
        ]);
        r.canonicalize();
        let csv = r.records_csv();
        assert_eq!(csv, "task,dataset,split,metric,value\ncalibration,d,test,a,0.3\nosr,d,test,b,0.333333333\n");
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back.records[1].value, 0.333333333);
        assert_eq!(back.to_json(), r.to_json());
    }
}
