//! Dataset manifests: a JSON document binding named splits to UBT tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::tensor::{load_tensor, save_tensor, Tensor};
use super::TensorError;

/// Tolerance on soft-label row sums before renormalization.
pub const SOFT_LABEL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
    CovariateShift,
    SemanticShift,
    LabelUncertainty,
    Subpopulation,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
            SplitRole::CovariateShift => "covariate_shift",
            SplitRole::SemanticShift => "semantic_shift",
            SplitRole::LabelUncertainty => "label_uncertainty",
            SplitRole::Subpopulation => "subpopulation",
        }
    }
}

/// On-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    pub name: String,
    pub classes: Vec<String>,
    /// Class names treated as out-of-distribution when labeling sequence
    /// examples for open-set recognition.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ood_classes: Vec<String>,
    pub splits: BTreeMap<String, SplitDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDoc {
    pub role: SplitRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    /// `[N x K]`
    Flat(Array2<f64>),
    /// `[N x L x K]`
    Sequence(Array3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// `[N]`, ids in `[0, K)`.
    Flat(Vec<usize>),
    /// `[N x L]`, ids in `[0, K]` where `K` marks padding.
    Sequence(Array2<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Flat(v) => v.len(),
            Labels::Sequence(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_flat(&self) -> Option<&[usize]> {
        match self {
            Labels::Flat(v) => Some(v),
            Labels::Sequence(_) => None,
        }
    }
}

/// A validated split with its tensors loaded and upcast to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub role: SplitRole,
    pub embeddings: Option<Array2<f64>>,
    pub logits: Option<Logits>,
    pub labels: Labels,
    /// Rows renormalized to sum to exactly one (up to rounding) after validation.
    pub soft_labels: Option<Array2<f64>>,
    pub groups: Option<Vec<u32>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self.labels, Labels::Sequence(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub ood_classes: Vec<usize>,
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// The padding id used in sequence labels.
    pub fn padding_id(&self) -> usize {
        self.classes.len()
    }

    pub fn splits_with_role(&self, role: SplitRole) -> impl Iterator<Item = (&str, &Split)> {
        self.splits
            .iter()
            .filter(move |(_, s)| s.role == role)
            .map(|(n, s)| (n.as_str(), s))
    }

    pub fn first_with_role(&self, role: SplitRole) -> Option<(&str, &Split)> {
        self.splits_with_role(role).next()
    }

    /// Writes every split as UBT files next to a `manifest.json` in `dir`
    /// and returns the manifest path. Float tensors are written as f64.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf, TensorError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| TensorError::io(dir, e))?;
        let mut splits = BTreeMap::new();
        for (name, split) in &self.splits {
            let file = |field: &str| format!("{name}.{field}.ubt");
            let mut doc = SplitDoc {
                role: split.role,
                embeddings: None,
                logits: None,
                labels: file("labels"),
                soft_labels: None,
                groups: None,
            };
            if let Some(e) = &split.embeddings {
                save_tensor(&Tensor::from_array2(e), dir.join(file("embeddings")))?;
                doc.embeddings = Some(file("embeddings"));
            }
            if let Some(l) = &split.logits {
                let t = match l {
                    Logits::Flat(a) => Tensor::from_array2(a),
                    Logits::Sequence(a) => {
                        let (n, len, k) = a.dim();
                        Tensor::from_f64(vec![n, len, k], a.iter().copied().collect())?
                    }
                };
                save_tensor(&t.into_raw_scores(), dir.join(file("logits")))?;
                doc.logits = Some(file("logits"));
            }
            let labels = match &split.labels {
                Labels::Flat(v) => Tensor::from_labels(v),
                Labels::Sequence(a) => Tensor::from_i32(
                    vec![a.nrows(), a.ncols()],
                    a.iter().map(|&v| v as i32).collect(),
                )?,
            };
            save_tensor(&labels, dir.join(file("labels")))?;
            if let Some(s) = &split.soft_labels {
                save_tensor(&Tensor::from_array2(s), dir.join(file("soft_labels")))?;
                doc.soft_labels = Some(file("soft_labels"));
            }
            if let Some(g) = &split.groups {
                let t = Tensor::from_i32(vec![g.len()], g.iter().map(|&v| v as i32).collect())?;
                save_tensor(&t, dir.join(file("groups")))?;
                doc.groups = Some(file("groups"));
            }
            splits.insert(name.clone(), doc);
        }
        let doc = ManifestDoc {
            name: self.name.clone(),
            classes: self.classes.clone(),
            ood_classes: self
                .ood_classes
                .iter()
                .map(|&k| self.classes[k].clone())
                .collect(),
            splits,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&doc).map_err(|e| TensorError::Schema(e.to_string()))?;
        fs::write(&path, text).map_err(|e| TensorError::io(&path, e))?;
        Ok(path)
    }
}

/// Loads and eagerly validates a manifest and every tensor it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, TensorError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TensorError::io(path, e))?;
    let doc: ManifestDoc =
        serde_json::from_str(&text).map_err(|e| TensorError::Schema(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    build_manifest(doc, base)
}

fn build_manifest(doc: ManifestDoc, base: &Path) -> Result<DatasetManifest, TensorError> {
    let k = doc.classes.len();
    if k < 2 {
        return Err(TensorError::Schema(format!("need at least 2 classes, found {k}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &doc.classes {
        if !seen.insert(c.as_str()) {
            return Err(TensorError::Schema(format!("duplicate class name {c:?}")));
        }
    }
    let ood_classes = doc
        .ood_classes
        .iter()
        .map(|name| {
            doc.classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| TensorError::Schema(format!("unknown ood class {name:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if doc.splits.is_empty() {
        return Err(TensorError::Schema("manifest declares no splits".into()));
    }
    let mut splits = BTreeMap::new();
    for (name, sdoc) in doc.splits {
        let split = load_split(&name, &sdoc, base, k)
            .map_err(|e| TensorError::Split { split: name.clone(), source: Box::new(e) })?;
        splits.insert(name, split);
    }
    Ok(DatasetManifest {
        name: doc.name,
        classes: doc.classes,
        ood_classes,
        splits,
    })
}

fn load_split(name: &str, doc: &SplitDoc, base: &Path, k: usize) -> Result<Split, TensorError> {
    if doc.embeddings.is_none() && doc.logits.is_none() {
        return Err(TensorError::Schema(format!(
            "split {name:?} has neither embeddings nor logits"
        )));
    }
    let load = |rel: &str| load_tensor(base.join(rel));

    let labels_t = load(&doc.labels)?;
    let raw = labels_t.to_int_vec()?;
    let labels = match labels_t.dims() {
        [_] => {
            let v = raw
                .iter()
                .map(|&l| check_label(l, k, false))
                .collect::<Result<Vec<_>, _>>()?;
            Labels::Flat(v)
        }
        [n, len] => {
            let v = raw
                .iter()
                .map(|&l| check_label(l, k, true))
                .collect::<Result<Vec<_>, _>>()?;
            let a = Array2::from_shape_vec((*n, *len), v).expect("dims checked");
            for row in a.rows() {
                if let Some(first_pad) = row.iter().position(|&l| l == k) {
                    if row.iter().skip(first_pad).any(|&l| l != k) {
                        return Err(TensorError::Shape(
                            "sequence labels continue after padding".into(),
                        ));
                    }
                }
            }
            Labels::Sequence(a)
        }
        other => {
            return Err(TensorError::Shape(format!(
                "labels must be [N] or [N x L], found {other:?}"
            )))
        }
    };
    let n = labels.len();

    let embeddings = match &doc.embeddings {
        Some(rel) => {
            let t = load(rel)?;
            if !t.all_finite() {
                return Err(TensorError::NonFinite);
            }
            let a = t.to_array2()?;
            if a.nrows() != n {
                return Err(count_mismatch("labels", n, "embeddings", a.nrows()));
            }
            Some(a)
        }
        None => None,
    };

    let logits = match &doc.logits {
        Some(rel) => {
            let t = load(rel)?;
            let values = t.to_f64_vec();
            if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(TensorError::Shape("logits contain NaN or +inf".into()));
            }
            let logits = match (t.dims(), &labels) {
                ([rows, cols], Labels::Flat(_)) => {
                    Logits::Flat(Array2::from_shape_vec((*rows, *cols), values).expect("dims"))
                }
                ([rows, len, cols], Labels::Sequence(l)) => {
                    if *len != l.ncols() {
                        return Err(count_mismatch("label steps", l.ncols(), "logit steps", *len));
                    }
                    Logits::Sequence(
                        Array3::from_shape_vec((*rows, *len, *cols), values).expect("dims"),
                    )
                }
                (dims, _) => {
                    return Err(TensorError::Shape(format!(
                        "logits dims {dims:?} do not match label layout"
                    )))
                }
            };
            let (rows, cols) = match &logits {
                Logits::Flat(a) => (a.nrows(), a.ncols()),
                Logits::Sequence(a) => (a.dim().0, a.dim().2),
            };
            if rows != n {
                return Err(count_mismatch("labels", n, "logits", rows));
            }
            if cols != k {
                return Err(count_mismatch("classes", k, "logit columns", cols));
            }
            Some(logits)
        }
        None => None,
    };

    let soft_labels = match &doc.soft_labels {
        Some(rel) => {
            let t = load(rel)?;
            if !t.all_finite() {
                return Err(TensorError::NonFinite);
            }
            let mut a = t.to_array2()?;
            if a.nrows() != n {
                return Err(count_mismatch("labels", n, "soft_labels", a.nrows()));
            }
            if a.ncols() != k {
                return Err(count_mismatch("classes", k, "soft_label columns", a.ncols()));
            }
            for (i, mut row) in a.rows_mut().into_iter().enumerate() {
                if let Some(&v) = row.iter().find(|v| **v < 0.0) {
                    return Err(TensorError::SoftLabel(format!("row {i} has negative entry {v}")));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > SOFT_LABEL_TOL {
                    let shown = (sum * 1e6).round() / 1e6;
                    return Err(TensorError::SoftLabel(format!("row {i}: row sum {shown}")));
                }
                row.mapv_inplace(|v| v / sum);
            }
            Some(a)
        }
        None => None,
    };

    let groups = match &doc.groups {
        Some(rel) => {
            let t = load(rel)?;
            if t.rank() != 1 {
                return Err(TensorError::Shape(format!("groups must be [N], found {:?}", t.dims())));
            }
            let g = t
                .to_int_vec()?
                .into_iter()
                .map(|v| {
                    u32::try_from(v)
                        .map_err(|_| TensorError::Shape(format!("negative group id {v}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if g.len() != n {
                return Err(count_mismatch("labels", n, "groups", g.len()));
            }
            Some(g)
        }
        None => None,
    };

    Ok(Split {
        role: doc.role,
        embeddings,
        logits,
        labels,
        soft_labels,
        groups,
    })
}

fn check_label(l: i64, k: usize, allow_padding: bool) -> Result<usize, TensorError> {
    let limit = if allow_padding { k } else { k - 1 };
    if l < 0 || l as usize > limit {
        return Err(TensorError::Shape(format!("label id {l} outside [0, {k})")));
    }
    Ok(l as usize)
}

fn count_mismatch(a: &str, na: usize, b: &str, nb: usize) -> TensorError {
    TensorError::Shape(format!("{a} has {na} rows but {b} has {nb}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::save_tensor;

    fn write_json(dir: &Path, doc: &serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(doc).unwrap()).unwrap();
        p
    }

    fn labels(dir: &Path, name: &str, v: &[i32]) {
        save_tensor(&Tensor::from_i32(vec![v.len()], v.to_vec()).unwrap(), dir.join(name)).unwrap();
    }

    fn floats(dir: &Path, name: &str, dims: Vec<usize>, v: Vec<f32>) {
        save_tensor(&Tensor::from_f32(dims, v).unwrap(), dir.join(name)).unwrap();
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "tr_y.ubt", &[0, 1]);
        labels(dir.path(), "te_y.ubt", &[1, 0]);
        floats(dir.path(), "tr_x.ubt", vec![2, 3], vec![0.0; 6]);
        floats(dir.path(), "te_z.ubt", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {
                    "train": {"role": "train", "embeddings": "tr_x.ubt", "labels": "tr_y.ubt"},
                    "test": {"role": "test", "logits": "te_z.ubt", "labels": "te_y.ubt"}
                }
            }),
        );
        let m = load_manifest(p).unwrap();
        assert_eq!(m.splits.len(), 2);
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.splits["test"].labels.as_flat().unwrap(), &[1, 0]);
    }

    #[test]
    fn row_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "y.ubt", &[0; 10]);
        floats(dir.path(), "x.ubt", vec![9, 2], vec![0.0; 18]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"train": {"role": "train", "embeddings": "x.ubt", "labels": "y.ubt"}}
            }),
        );
        let msg = load_manifest(p).unwrap_err().to_string();
        assert!(msg.contains("10") && msg.contains('9'), "{msg}");
    }

    #[test]
    fn soft_label_row_sum_reported() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "y.ubt", &[0]);
        floats(dir.path(), "x.ubt", vec![1, 2], vec![0.0; 2]);
        floats(dir.path(), "s.ubt", vec![1, 2], vec![0.7, 0.7]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"lu": {"role": "label_uncertainty", "embeddings": "x.ubt",
                                   "labels": "y.ubt", "soft_labels": "s.ubt"}}
            }),
        );
        let msg = load_manifest(p).unwrap_err().to_string();
        assert!(msg.contains("row sum 1.4"), "{msg}");
    }

    #[test]
    fn soft_labels_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "y.ubt", &[0]);
        floats(dir.path(), "x.ubt", vec![1, 2], vec![0.0; 2]);
        floats(dir.path(), "s.ubt", vec![1, 2], vec![0.300001, 0.7]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"lu": {"role": "label_uncertainty", "embeddings": "x.ubt",
                                   "labels": "y.ubt", "soft_labels": "s.ubt"}}
            }),
        );
        let m = load_manifest(p).unwrap();
        let s = m.splits["lu"].soft_labels.as_ref().unwrap();
        assert!((s.row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "y.ubt", &[0, 2]);
        floats(dir.path(), "x.ubt", vec![2, 1], vec![0.0; 2]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"train": {"role": "train", "embeddings": "x.ubt", "labels": "y.ubt"}}
            }),
        );
        assert!(load_manifest(p).is_err());
    }

    #[test]
    fn duplicate_classes_and_missing_sources_rejected() {
        let dir = tempfile::tempdir().unwrap();
        labels(dir.path(), "y.ubt", &[0]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "a"],
                "splits": {"train": {"role": "train", "labels": "y.ubt"}}
            }),
        );
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"train": {"role": "train", "labels": "y.ubt"}}
            }),
        );
        assert!(load_manifest(&p).unwrap_err().to_string().contains("neither"));
    }

    #[test]
    fn missing_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "toy", "classes": ["a", "b"],
                "splits": {"train": {"role": "train", "embeddings": "nope.ubt", "labels": "y.ubt"}}
            }),
        );
        assert!(load_manifest(p).is_err());
    }

    #[test]
    fn sequence_splits_with_padding() {
        let dir = tempfile::tempdir().unwrap();
        // K = 2, padding id 2.
        save_tensor(
            &Tensor::from_i32(vec![2, 3], vec![0, 1, 2, 1, 2, 2]).unwrap(),
            dir.path().join("y.ubt"),
        )
        .unwrap();
        floats(dir.path(), "z.ubt", vec![2, 3, 2], vec![0.0; 12]);
        let p = write_json(
            dir.path(),
            &serde_json::json!({
                "name": "seq", "classes": ["a", "b"], "ood_classes": ["b"],
                "splits": {"test": {"role": "test", "logits": "z.ubt", "labels": "y.ubt"}}
            }),
        );
        let m = load_manifest(p).unwrap();
        assert!(m.splits["test"].is_sequence());
        assert_eq!(m.ood_classes, vec![1]);
    }
}
