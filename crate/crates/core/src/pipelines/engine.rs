//! Planning and task execution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use ndarray::{Array2, ArrayView2, Axis};

use super::config::{ModelSpec, OsrScore, RunConfig, Task};
use super::report::{score_records, Curve, HeadInfo, Provenance, Report, Skip, DESCRIPTIVE};
use super::{PipelineError, FLAG_DEGENERATE, FLAG_OC_AUROC, FLAG_SEQUENCE_ENTROPY};
use crate::active_learning::{al_loop, AlConfig};
use crate::heads::{
    fewshot_sample, lbfgs_logreg, load_head, save_head, train_head, tune_temperature, Classifier, Head, HeadSpec,
    TrainConfig, TrainedHead,
};
use crate::linalg::softmax_rows;
use crate::metrics::{
    accuracy, binary_auprc, binary_auroc, brier, calibration_auroc, ece, ece_bins, label_uncertainty_kl, nll,
    oracle_collaborative_accuracy, oracle_collaborative_auroc, per_group_accuracy, rejection_auc, rejection_curve,
    subpopulation_percentiles, CurvePoint, MetricError, MetricRecord, MetricSpec, PredictionBatch, RejectionMetric,
};
use crate::ood::{
    entropy_score, fit_class_gaussians, maxlogit_score, msp_score, osr_evaluate, sequence_entropy_score,
    GaussianClassModel, SequenceDistribution,
};
use crate::tensor_store::{load_manifest, DatasetManifest, Labels, Logits, Split, SplitRole};

struct Dataset {
    name: String,
    m: DatasetManifest,
}

impl Dataset {
    fn first(&self, role: SplitRole) -> Option<(&str, &Split)> {
        self.m.first_with_role(role)
    }

    fn k(&self) -> usize {
        self.m.num_classes()
    }
}

fn flat_embeddings(split: &Split) -> Option<(&Array2<f64>, &[usize])> {
    Some((split.embeddings.as_ref()?, split.labels.as_flat()?))
}

/// Records, curves and notes produced by tasks, before they are assembled
/// into a report.
#[derive(Default, Clone)]
struct Out {
    records: Vec<MetricRecord>,
    curves: BTreeMap<String, Curve>,
    skipped: Vec<Skip>,
    warnings: Vec<String>,
}

impl Out {
    fn skip(&mut self, task: Task, dataset: &str, split: &str, reason: impl Into<String>) {
        self.skipped.push(Skip {
            task: task.as_str().into(),
            dataset: dataset.into(),
            split: split.into(),
            reason: reason.into(),
        });
    }

    fn extend(&mut self, other: Out) {
        self.records.extend(other.records);
        self.curves.extend(other.curves);
        self.skipped.extend(other.skipped);
        self.warnings.extend(other.warnings);
    }
}

/// Where records of one task on one split go.
struct Site<'a> {
    task: Task,
    name: &'a str,
    dataset: &'a str,
    split: &'a str,
    flags: &'a [String],
}

impl Site<'_> {
    fn push(&self, out: &mut Out, metric: impl Into<String>, value: f64, spec: MetricSpec) {
        let mut r = MetricRecord::new(self.name, self.dataset, self.split, metric, value, spec);
        for f in self.flags {
            r = r.with_flag(f.clone());
        }
        out.records.push(r);
    }

    /// Pushes `value`, or records a skip when the metric is undefined on
    /// this input.
    fn push_or_skip(
        &self,
        out: &mut Out,
        metric: &str,
        value: Result<f64, MetricError>,
        spec: MetricSpec,
    ) -> Result<(), PipelineError> {
        match value {
            Ok(v) => self.push(out, metric, v, spec),
            Err(MetricError::Degenerate(why)) => out.skip(self.task, self.dataset, self.split, format!("{metric}: {why}")),
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>, PipelineError> {
    let mut errs = Vec::new();
    let mut out: Vec<Dataset> = Vec::new();
    for path in &cfg.manifests {
        match load_manifest(path) {
            Ok(m) => {
                if out.iter().any(|d| d.name == m.name) {
                    errs.push(format!("dataset name {:?} appears in more than one manifest", m.name));
                }
                out.push(Dataset { name: m.name.clone(), m });
            }
            Err(e) => errs.push(format!("{}: {e}", path.display())),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(PipelineError::Validation(errs))
    }
}

/// Why `model` cannot be evaluated on `ds`, if it cannot.
fn model_blocker(model: &ModelSpec, saved: Option<&TrainedHead>, ds: &Dataset) -> Option<String> {
    let Some((test_name, test)) = ds.first(SplitRole::Test) else {
        return Some("no test split".into());
    };
    match model {
        ModelSpec::Logits { .. } => test
            .logits
            .is_none()
            .then(|| format!("test split {test_name:?} has no logits")),
        ModelSpec::Head { .. } | ModelSpec::Lbfgs { .. } => {
            let Some((train_name, train)) = ds.first(SplitRole::Train) else {
                return Some("no train split".into());
            };
            if flat_embeddings(train).is_none() {
                return Some(format!("train split {train_name:?} lacks embeddings or flat labels"));
            }
            flat_embeddings(test)
                .is_none()
                .then(|| format!("test split {test_name:?} lacks embeddings or flat labels"))
        }
        ModelSpec::Saved { .. } => {
            let Some((e, _)) = flat_embeddings(test) else {
                return Some(format!("test split {test_name:?} lacks embeddings or flat labels"));
            };
            let head = &saved.expect("saved heads are loaded before planning").head;
            (head.input_dim() != e.ncols() || head.num_classes() != ds.k()).then(|| {
                format!(
                    "saved head is {}x{} but the dataset has {} dims and {} classes",
                    head.input_dim(),
                    head.num_classes(),
                    e.ncols(),
                    ds.k()
                )
            })
        }
    }
}

fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &y in labels {
        c[y] += 1;
    }
    c
}

/// Why `task` cannot run on `ds` regardless of model, if it cannot.
fn task_blocker(task: Task, ds: &Dataset, cfg: &RunConfig) -> Option<String> {
    let test = ds.first(SplitRole::Test).map(|(_, s)| s);
    let train = ds.first(SplitRole::Train).map(|(_, s)| s);
    let emb_train = || train.and_then(flat_embeddings);
    let emb_test = || test.and_then(flat_embeddings);
    match task {
        Task::Eval | Task::Calibration | Task::Selective => test.is_none().then(|| "no test split".into()),
        Task::Osr => {
            let test = test?;
            if test.is_sequence() {
                ds.m
                    .ood_classes
                    .is_empty()
                    .then(|| "sequence dataset lists no ood_classes".into())
            } else {
                ds.first(SplitRole::SemanticShift)
                    .is_none()
                    .then(|| "no semantic_shift split".into())
            }
        }
        .or_else(|| test.is_none().then(|| "no test split".into())),
        Task::LabelUncertainty => (!ds.m.splits.values().any(|s| s.soft_labels.is_some() && !s.is_sequence()))
            .then(|| "no split carries soft labels".into()),
        Task::Subpop => (!ds.m.splits.values().any(|s| s.groups.is_some() && !s.is_sequence()))
            .then(|| "no split carries group ids".into()),
        Task::Fewshot => {
            let Some((_, y)) = emb_train() else {
                return Some("train split lacks embeddings or flat labels".into());
            };
            if emb_test().is_none() {
                return Some("test split lacks embeddings or flat labels".into());
            }
            let need = cfg.fewshot.shots.iter().copied().max().unwrap_or(0);
            class_counts(y, ds.k())
                .iter()
                .position(|&c| c < need)
                .map(|k| format!("class {:?} has {} train examples, {need} shots requested", ds.m.classes[k], class_counts(y, ds.k())[k]))
        }
        Task::ZeroshotOsr => {
            if emb_train().is_none() {
                return Some("train split lacks embeddings or flat labels".into());
            }
            if test.and_then(|s| s.embeddings.as_ref()).is_none() {
                return Some("test split lacks embeddings".into());
            }
            (!ds.m
                .splits_with_role(SplitRole::SemanticShift)
                .any(|(_, s)| s.embeddings.is_some()))
            .then(|| "no semantic_shift split with embeddings".into())
        }
        Task::ActiveLearning => {
            let Some((_, y)) = emb_train() else {
                return Some("train split lacks embeddings or flat labels".into());
            };
            if emb_test().is_none() {
                return Some("test split lacks embeddings or flat labels".into());
            }
            let sizes = match cfg.active_learning.sizes(ds.k()) {
                Ok(s) => s,
                Err(e) => return Some(e.to_string()),
            };
            if y.len() < sizes.max {
                return Some(format!("pool has {} examples, the label budget is {}", y.len(), sizes.max));
            }
            let per_class = (sizes.init / ds.k()).max(1);
            class_counts(y, ds.k())
                .iter()
                .position(|&c| c < per_class)
                .map(|k| format!("class {:?} has fewer than {per_class} pool examples", ds.m.classes[k]))
        }
        Task::Score => None,
    }
}

struct Plan {
    datasets: Vec<Dataset>,
    saved: BTreeMap<String, TrainedHead>,
    /// `(task, dataset index, model index)`; model-free tasks use `None`.
    blocked: BTreeSet<(Task, usize, Option<usize>)>,
    /// Skips per model name, with model-free ones under `""`.
    skipped: BTreeMap<String, Vec<Skip>>,
}

fn plan(cfg: &RunConfig) -> Result<Plan, PipelineError> {
    cfg.validate()?;
    if cfg.tasks.iter().all(|&t| t == Task::Score) {
        return Err(PipelineError::invalid("score needs at least one other task"));
    }
    let datasets = load_datasets(cfg)?;
    let mut saved = BTreeMap::new();
    let mut errs = Vec::new();
    for m in &cfg.models {
        if let ModelSpec::Saved { name, path } = m {
            match load_head(path) {
                Ok(h) => {
                    saved.insert(name.clone(), h);
                }
                Err(e) => errs.push(format!("model {name:?}: cannot load {}: {e}", path.display())),
            }
        }
    }
    if !errs.is_empty() {
        return Err(PipelineError::Validation(errs));
    }

    let tasks: BTreeSet<Task> = cfg.tasks.iter().copied().collect();
    let mut blocked = BTreeSet::new();
    let mut skipped: BTreeMap<String, Vec<Skip>> = BTreeMap::new();
    let mut note = |task: Task, di: usize, mi: Option<usize>, reason: String, errs: &mut Vec<String>| {
        let ds = &datasets[di].name;
        let model = mi.map_or("", |i| cfg.models[i].name());
        let who = if model.is_empty() { String::new() } else { format!(" for model {model:?}") };
        errs.push(format!("{task} on dataset {ds:?}{who}: {reason}"));
        blocked.insert((task, di, mi));
        skipped.entry(model.to_string()).or_default().push(Skip {
            task: task.as_str().into(),
            dataset: ds.clone(),
            split: String::new(),
            reason,
        });
    };
    for (di, ds) in datasets.iter().enumerate() {
        for &task in &tasks {
            if let Some(reason) = task_blocker(task, ds, cfg) {
                let mis: Vec<Option<usize>> = if task.uses_model() {
                    (0..cfg.models.len()).map(Some).collect()
                } else {
                    vec![None]
                };
                for mi in mis {
                    note(task, di, mi, reason.clone(), &mut errs);
                }
                continue;
            }
            if !task.uses_model() {
                continue;
            }
            for (mi, model) in cfg.models.iter().enumerate() {
                if let Some(reason) = model_blocker(model, saved.get(model.name()), ds) {
                    note(task, di, Some(mi), reason, &mut errs);
                }
            }
        }
    }
    if !errs.is_empty() && !cfg.allow_missing {
        return Err(PipelineError::Validation(errs));
    }
    Ok(Plan {
        datasets,
        saved,
        blocked,
        skipped,
    })
}

enum Fitted {
    Logits,
    Head(Head),
}

fn train_xy(ds: &Dataset) -> (ArrayView2<'_, f64>, &[usize]) {
    let (_, split) = ds.first(SplitRole::Train).expect("checked during planning");
    let (x, y) = flat_embeddings(split).expect("checked during planning");
    (x.view(), y)
}

fn fit(cfg: &RunConfig, model: &ModelSpec, plan: &Plan, ds: &Dataset, out: &mut Out) -> Result<(Fitted, Option<HeadInfo>), PipelineError> {
    let info = |kind: &str, seed: u64, train_loss: Option<f64>, temperature: Option<f64>| HeadInfo {
        dataset: ds.name.clone(),
        kind: kind.into(),
        seed,
        train_loss,
        temperature,
    };
    match model {
        ModelSpec::Logits { .. } => Ok((Fitted::Logits, None)),
        ModelSpec::Saved { name, .. } => {
            let t = &plan.saved[name];
            Ok((Fitted::Head(t.head.clone()), Some(info(t.head.kind_name(), t.seed, t.train_loss, None))))
        }
        ModelSpec::Lbfgs { name, options } => {
            let (x, y) = train_xy(ds);
            let o = lbfgs_logreg(x, y, ds.k(), options)?;
            if !o.converged {
                out.warnings.push(format!(
                    "model {name:?} on {:?}: L-BFGS stopped after {} iterations with gradient norm {:e}",
                    ds.name, o.iterations, o.grad_norm
                ));
            }
            Ok((Fitted::Head(Head::Linear(o.head)), Some(info("linear", 0, Some(o.objective), None))))
        }
        ModelSpec::Head { spec, train, .. } => {
            let (x, y) = train_xy(ds);
            let tcfg = TrainConfig {
                seed: train.seed.wrapping_add(cfg.seed),
                ..train.clone()
            };
            let val = ds.first(SplitRole::Validation).and_then(|(_, s)| flat_embeddings(s));
            let (trained, temperature) = match (spec, val) {
                (HeadSpec::Heteroscedastic { temperature: None, .. }, Some((vx, vy))) => {
                    let (t, h) = tune_temperature(spec, x, y, vx.view(), vy, ds.k(), &tcfg, None)?;
                    (h, Some(t))
                }
                (HeadSpec::Heteroscedastic { temperature, .. }, None) => {
                    (train_head(spec, x, y, ds.k(), &tcfg)?, Some(temperature.unwrap_or(1.0)))
                }
                _ => (train_head(spec, x, y, ds.k(), &tcfg)?, None),
            };
            let i = info(trained.head.kind_name(), trained.seed, trained.train_loss, temperature);
            Ok((Fitted::Head(trained.head), Some(i)))
        }
    }
}

/// Predictions of a model on one split, with sequences flattened to their
/// non-padding tokens.
struct Preds {
    batch: PredictionBatch,
    logits: Option<Array2<f64>>,
}

fn token_rows(logits: &ndarray::Array3<f64>, labels: &Array2<usize>, pad: usize) -> (Array2<f64>, Vec<usize>) {
    let k = logits.dim().2;
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for ((i, l), &y) in labels.indexed_iter() {
        if y != pad {
            rows.extend(logits.slice(ndarray::s![i, l, ..]).iter().copied());
            ys.push(y);
        }
    }
    let n = ys.len();
    (Array2::from_shape_vec((n, k), rows).expect("row-major token logits"), ys)
}

fn predict(fitted: &Fitted, ds: &Dataset, split: &Split) -> Result<Result<Preds, String>, PipelineError> {
    let (probs, logits, labels) = match fitted {
        Fitted::Logits => match (&split.logits, &split.labels) {
            (None, _) => return Ok(Err("split has no logits".into())),
            (Some(Logits::Flat(a)), Labels::Flat(y)) => (softmax_rows(a.view()), Some(a.clone()), y.clone()),
            (Some(Logits::Sequence(a)), Labels::Sequence(y)) => {
                let (rows, ys) = token_rows(a, y, ds.m.padding_id());
                if ys.is_empty() {
                    return Ok(Err("split has no non-padding tokens".into()));
                }
                (softmax_rows(rows.view()), Some(rows), ys)
            }
            _ => return Ok(Err("logits and labels disagree on sequence layout".into())),
        },
        Fitted::Head(h) => {
            let (Some(x), Some(y)) = (&split.embeddings, split.labels.as_flat()) else {
                return Ok(Err("split lacks embeddings or flat labels".into()));
            };
            if x.ncols() != h.input_dim() {
                return Ok(Err(format!("embeddings have {} dims, the head expects {}", x.ncols(), h.input_dim())));
            }
            let logits = match h {
                Head::Linear(l) => Some(l.logits(x.view())),
                _ => None,
            };
            (h.predict_probs(x.view()), logits, y.to_vec())
        }
    };
    let mut batch = PredictionBatch::new(probs, labels)?;
    if !split.is_sequence() {
        if let Some(s) = &split.soft_labels {
            batch = batch.with_soft_labels(s.clone())?;
        }
        if let Some(g) = &split.groups {
            batch = batch.with_groups(g.clone())?;
        }
    }
    Ok(Ok(Preds { batch, logits }))
}

/// Splits evaluated by eval, calibration and selective, with the record task
/// name for each.
fn eval_splits(ds: &Dataset) -> Vec<(&str, &Split, &'static str)> {
    ds.m.splits
        .iter()
        .filter_map(|(n, s)| {
            let name = match s.role {
                SplitRole::Test => "in_distribution",
                SplitRole::CovariateShift => "covariate_shift",
                SplitRole::Subpopulation => "subpopulation",
                _ => return None,
            };
            Some((n.as_str(), s, name))
        })
        .collect()
}

fn p1_scores(batch: &PredictionBatch) -> (Vec<f64>, Vec<bool>) {
    let scores = (0..batch.len()).map(|i| batch.row(i)[1]).collect();
    let pos = batch.labels().iter().map(|&l| l == 1).collect();
    (scores, pos)
}

struct ModelCtx<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    fitted: &'a Fitted,
    flags: &'a [String],
    gaussians: &'a mut Option<Result<FitGaussians, String>>,
}

impl ModelCtx<'_> {
    fn site<'b>(&'b self, task: Task, name: &'b str, split: &'b str) -> Site<'b> {
        Site {
            task,
            name,
            dataset: &self.ds.name,
            split,
            flags: self.flags,
        }
    }
}

fn run_model_task(task: Task, c: &mut ModelCtx<'_>, out: &mut Out) -> Result<(), PipelineError> {
    match task {
        Task::Eval | Task::Calibration | Task::Selective => {
            for (split_name, split, record_task) in eval_splits(c.ds) {
                let preds = match predict(c.fitted, c.ds, split)? {
                    Ok(p) => p,
                    Err(why) => {
                        out.skip(task, &c.ds.name, split_name, why);
                        continue;
                    }
                };
                let name = match task {
                    Task::Eval => record_task,
                    Task::Calibration => "calibration",
                    _ => "selective",
                };
                let site = c.site(task, name, split_name);
                match task {
                    Task::Eval => eval_split(c, &site, &preds.batch, out)?,
                    Task::Calibration => calibration_split(c, &site, &preds.batch, out)?,
                    _ => selective_split(c, &site, &preds.batch, out)?,
                }
            }
        }
        Task::Osr => osr(c, out)?,
        Task::LabelUncertainty => {
            for (split_name, split) in &c.ds.m.splits {
                if split.soft_labels.is_none() || split.is_sequence() {
                    continue;
                }
                match predict(c.fitted, c.ds, split)? {
                    Ok(p) => {
                        let site = c.site(task, "label_uncertainty", split_name);
                        site.push_or_skip(out, "kl", label_uncertainty_kl(&p.batch), MetricSpec::kl(c.ds.k()))?;
                    }
                    Err(why) => out.skip(task, &c.ds.name, split_name, why),
                }
            }
        }
        Task::Subpop => {
            for (split_name, split) in &c.ds.m.splits {
                if split.groups.is_none() || split.is_sequence() {
                    continue;
                }
                match predict(c.fitted, c.ds, split)? {
                    Ok(p) => {
                        let site = c.site(task, "subpopulation", split_name);
                        let groups = per_group_accuracy(&p.batch)?;
                        for (pct, v) in subpopulation_percentiles(&groups, &c.cfg.metrics.percentiles)? {
                            site.push(out, format!("accuracy_p{pct}"), v, MetricSpec::unit_higher());
                        }
                    }
                    Err(why) => out.skip(task, &c.ds.name, split_name, why),
                }
            }
        }
        _ => unreachable!("model-free task {task}"),
    }
    Ok(())
}

fn eval_split(c: &ModelCtx<'_>, site: &Site<'_>, b: &PredictionBatch, out: &mut Out) -> Result<(), PipelineError> {
    let k = c.ds.k();
    site.push(out, "accuracy", accuracy(b), MetricSpec::unit_higher());
    site.push(out, "nll", nll(b), MetricSpec::nll(k));
    site.push(out, "brier", brier(b), MetricSpec::brier());
    site.push(out, "ece", ece(b, c.cfg.metrics.ece_bins)?, MetricSpec::unit_lower());
    if k == 2 {
        let (s, pos) = p1_scores(b);
        site.push_or_skip(out, "auroc", binary_auroc(&s, &pos), MetricSpec::unit_higher())?;
        site.push_or_skip(out, "auprc", binary_auprc(&s, &pos), MetricSpec::unit_higher())?;
    }
    Ok(())
}

fn calibration_split(c: &ModelCtx<'_>, site: &Site<'_>, b: &PredictionBatch, out: &mut Out) -> Result<(), PipelineError> {
    site.push_or_skip(out, "calibration_auroc", calibration_auroc(b), MetricSpec::unit_higher())?;
    let points = ece_bins(b, c.cfg.metrics.ece_bins)?
        .iter()
        .filter(|bin| bin.count > 0)
        .map(|bin| CurvePoint {
            x: bin.mean_confidence,
            y: bin.accuracy,
        })
        .collect();
    out.curves.insert(
        format!("calibration/{}/{}/reliability", site.dataset, site.split),
        Curve {
            x_label: "confidence".into(),
            y_label: "accuracy".into(),
            points,
        },
    );
    Ok(())
}

fn selective_split(c: &ModelCtx<'_>, site: &Site<'_>, b: &PredictionBatch, out: &mut Out) -> Result<(), PipelineError> {
    let u = b.max_prob_uncertainty();
    let binary = c.ds.k() == 2;
    for &budget in &c.cfg.metrics.budgets {
        let acc = oracle_collaborative_accuracy(b, &u, budget)?;
        site.push(out, format!("oc_accuracy@{budget}"), acc, MetricSpec::unit_higher());
        if binary {
            let metric = format!("oc_auroc@{budget}");
            match oracle_collaborative_auroc(b, &u, budget) {
                Ok(v) => {
                    let r = MetricRecord::new(site.name, site.dataset, site.split, metric, v, MetricSpec::unit_higher());
                    let r = site.flags.iter().fold(r, |r, f| r.with_flag(f.clone()));
                    out.records.push(r.with_flag(FLAG_OC_AUROC));
                }
                Err(MetricError::Degenerate(why)) => out.skip(site.task, site.dataset, site.split, format!("{metric}: {why}")),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let metrics: &[RejectionMetric] = if binary {
        &[RejectionMetric::Accuracy, RejectionMetric::Auroc, RejectionMetric::Auprc]
    } else {
        &[RejectionMetric::Accuracy]
    };
    for &m in metrics {
        let curve = rejection_curve(b, &u, m, &c.cfg.metrics.rejection_rates)?;
        if !curve.omitted.is_empty() {
            out.warnings.push(format!(
                "{}/{}: {} undefined at {} rejection rates",
                site.dataset,
                site.split,
                m.as_str(),
                curve.omitted.len()
            ));
        }
        let pts = &curve.points;
        if pts.len() < 2 {
            out.skip(site.task, site.dataset, site.split, format!("rejection_auc.{}: fewer than two defined rates", m.as_str()));
            continue;
        }
        let span = pts[pts.len() - 1].x - pts[0].x;
        site.push(out, format!("rejection_auc.{}", m.as_str()), rejection_auc(pts), MetricSpec::new(true, 0.0, span));
        out.curves.insert(
            format!("selective/{}/{}/{}", site.dataset, site.split, m.as_str()),
            Curve {
                x_label: "rejection_rate".into(),
                y_label: m.as_str().into(),
                points: curve.points,
            },
        );
    }
    Ok(())
}

/// Class Gaussians fitted on the classes present in the train split.
struct FitGaussians {
    model: GaussianClassModel,
    present: usize,
}

fn fit_gaussians(cfg: &RunConfig, ds: &Dataset, out: &mut Out) -> Result<Result<FitGaussians, String>, PipelineError> {
    let Some((x, y)) = ds.first(SplitRole::Train).and_then(|(_, s)| flat_embeddings(s)) else {
        return Ok(Err("train split lacks embeddings or flat labels".into()));
    };
    let counts = class_counts(y, ds.k());
    let present: Vec<usize> = (0..ds.k()).filter(|&k| counts[k] > 0).collect();
    if present.len() < ds.k() {
        let missing: Vec<&str> = (0..ds.k())
            .filter(|&k| counts[k] == 0)
            .map(|k| ds.m.classes[k].as_str())
            .collect();
        out.warnings.push(format!("{}: Gaussians fitted without classes {missing:?}, which have no train examples", ds.name));
    }
    let mut remap = vec![usize::MAX; ds.k()];
    for (j, &k) in present.iter().enumerate() {
        remap[k] = j;
    }
    let ys: Vec<usize> = y.iter().map(|&v| remap[v]).collect();
    let model = fit_class_gaussians(x.view(), &ys, present.len(), cfg.metrics.ridge)?;
    if present.len() == 1 {
        out.warnings.push(format!(
            "{}: relative Mahalanobis is degenerate because the train split covers a single class",
            ds.name
        ));
    }
    Ok(Ok(FitGaussians {
        model,
        present: present.len(),
    }))
}

fn distance_records(
    g: &FitGaussians,
    site: &Site<'_>,
    in_x: ArrayView2<f64>,
    out_x: ArrayView2<f64>,
    which: &[OsrScore],
    out: &mut Out,
) -> Result<(), PipelineError> {
    for &s in which {
        let (a, b) = match s {
            OsrScore::Maha => (g.model.mahalanobis_scores(in_x)?, g.model.mahalanobis_scores(out_x)?),
            OsrScore::Rmaha => (
                g.model.relative_mahalanobis_scores(in_x)?,
                g.model.relative_mahalanobis_scores(out_x)?,
            ),
            _ => continue,
        };
        let r = osr_evaluate(&a, &b)?;
        let before = out.records.len();
        site.push(out, format!("{}.auroc", s.as_str()), r.auroc, MetricSpec::unit_higher());
        site.push(out, format!("{}.auprc", s.as_str()), r.auprc, MetricSpec::unit_higher());
        if s == OsrScore::Rmaha && g.present == 1 {
            for rec in &mut out.records[before..] {
                rec.flags.push(FLAG_DEGENERATE.into());
            }
        }
    }
    Ok(())
}

fn softmax_scores(s: OsrScore, p: &Preds) -> Option<Vec<f64>> {
    let probs = p.batch.probs();
    match s {
        OsrScore::Msp => Some(probs.rows().into_iter().map(msp_score).collect()),
        OsrScore::Entropy => Some(probs.rows().into_iter().map(entropy_score).collect()),
        OsrScore::Maxlogit => p.logits.as_ref().map(|l| l.rows().into_iter().map(maxlogit_score).collect()),
        OsrScore::Maha | OsrScore::Rmaha => None,
    }
}

fn osr(c: &mut ModelCtx<'_>, out: &mut Out) -> Result<(), PipelineError> {
    let ds = c.ds;
    let (test_name, test) = ds.first(SplitRole::Test).expect("checked during planning");
    if test.is_sequence() {
        return sequence_osr(c, out);
    }
    let in_preds = match predict(c.fitted, ds, test)? {
        Ok(p) => p,
        Err(why) => {
            out.skip(Task::Osr, &ds.name, test_name, why);
            return Ok(());
        }
    };
    let wants_distance = c.cfg.metrics.osr_scores.iter().any(|s| matches!(s, OsrScore::Maha | OsrScore::Rmaha));
    for (ood_name, ood) in ds.m.splits_with_role(SplitRole::SemanticShift) {
        let site = c.site(Task::Osr, "osr", ood_name);
        match predict(c.fitted, ds, ood)? {
            Ok(ood_preds) => {
                for &s in &c.cfg.metrics.osr_scores {
                    if matches!(s, OsrScore::Maha | OsrScore::Rmaha) {
                        continue;
                    }
                    match (softmax_scores(s, &in_preds), softmax_scores(s, &ood_preds)) {
                        (Some(a), Some(b)) => {
                            let r = osr_evaluate(&a, &b)?;
                            site.push(out, format!("{}.auroc", s.as_str()), r.auroc, MetricSpec::unit_higher());
                            site.push(out, format!("{}.auprc", s.as_str()), r.auprc, MetricSpec::unit_higher());
                        }
                        _ => out.skip(Task::Osr, &ds.name, ood_name, format!("{}: the model exposes no logits", s.as_str())),
                    }
                }
            }
            Err(why) => out.skip(Task::Osr, &ds.name, ood_name, why),
        }
        if !wants_distance {
            continue;
        }
        let (Some(in_x), Some(out_x)) = (&test.embeddings, &ood.embeddings) else {
            out.skip(Task::Osr, &ds.name, ood_name, "maha/rmaha: embeddings missing");
            continue;
        };
        if c.gaussians.is_none() {
            *c.gaussians = Some(fit_gaussians(c.cfg, ds, out)?);
        }
        match c.gaussians.as_ref().expect("just fitted") {
            Ok(g) => {
                let site = c.site(Task::Osr, "osr", ood_name);
                distance_records(g, &site, in_x.view(), out_x.view(), &c.cfg.metrics.osr_scores, out)?
            }
            Err(why) => out.skip(Task::Osr, &ds.name, ood_name, format!("maha/rmaha: {why}")),
        }
    }
    Ok(())
}

/// Sequence OSR: an example is out-of-distribution when any of its tokens
/// belongs to an OOD class.
fn sequence_osr(c: &mut ModelCtx<'_>, out: &mut Out) -> Result<(), PipelineError> {
    let ds = c.ds;
    let pad = ds.m.padding_id();
    let splits = ds
        .m
        .splits
        .iter()
        .filter(|(_, s)| matches!(s.role, SplitRole::Test | SplitRole::SemanticShift) && s.is_sequence());
    for (name, split) in splits {
        let (Fitted::Logits, Some(Logits::Sequence(logits)), Labels::Sequence(labels)) = (c.fitted, &split.logits, &split.labels)
        else {
            out.skip(Task::Osr, &ds.name, name, "sequence OSR needs stored sequence logits");
            continue;
        };
        let mut scores = Vec::new();
        let mut positives = Vec::new();
        for (i, row) in labels.rows().into_iter().enumerate() {
            let len = row.iter().take_while(|&&y| y != pad).count();
            if len == 0 {
                continue;
            }
            let steps = softmax_rows(logits.index_axis(Axis(0), i).slice(ndarray::s![..len, ..]));
            scores.push(sequence_entropy_score(&SequenceDistribution::new(steps, len)?));
            positives.push(row.iter().take(len).any(|y| ds.m.ood_classes.contains(y)));
        }
        let site = c.site(Task::Osr, "osr", name);
        let flagged = |out: &mut Out, before: usize| {
            for r in &mut out.records[before..] {
                r.flags.push(FLAG_SEQUENCE_ENTROPY.into());
            }
        };
        let before = out.records.len();
        site.push_or_skip(out, "sequence_entropy.auroc", binary_auroc(&scores, &positives), MetricSpec::unit_higher())?;
        site.push_or_skip(out, "sequence_entropy.auprc", binary_auprc(&scores, &positives), MetricSpec::unit_higher())?;
        flagged(out, before);
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fewshot(cfg: &RunConfig, ds: &Dataset, out: &mut Out) -> Result<(), PipelineError> {
    let (x, y) = train_xy(ds);
    let (test_name, test) = ds.first(SplitRole::Test).expect("checked during planning");
    let (tx, ty) = flat_embeddings(test).expect("checked during planning");
    let oods: Vec<(&str, &Array2<f64>)> = ds
        .m
        .splits_with_role(SplitRole::SemanticShift)
        .filter_map(|(n, s)| s.embeddings.as_ref().map(|e| (n, e)))
        .collect();
    let k = ds.k();
    for &shots in &cfg.fewshot.shots {
        // (split, metric) -> per-seed values; None marks an undefined value.
        let mut values: BTreeMap<(String, &'static str), Vec<Result<f64, String>>> = BTreeMap::new();
        for &s in &cfg.fewshot.seeds {
            let seed = s.wrapping_add(cfg.seed);
            let idx = fewshot_sample(y, &ds.m.classes, shots, seed)?;
            let xs = x.select(Axis(0), &idx);
            let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let fit = lbfgs_logreg(xs.view(), &ys, k, &cfg.fewshot.lbfgs)?;
            if !fit.converged {
                out.warnings.push(format!(
                    "{}: {shots}-shot L-BFGS with seed {seed} stopped after {} iterations",
                    ds.name, fit.iterations
                ));
            }
            let b = PredictionBatch::new(fit.head.predict_probs(tx.view()), ty.to_vec())?;
            let mut put = |split: &str, metric: &'static str, v: Result<f64, MetricError>| -> Result<(), PipelineError> {
                let v = match v {
                    Ok(v) => Ok(v),
                    Err(MetricError::Degenerate(why)) => Err(why),
                    Err(e) => return Err(e.into()),
                };
                values.entry((split.to_string(), metric)).or_default().push(v);
                Ok(())
            };
            put(test_name, "accuracy", Ok(accuracy(&b)))?;
            put(test_name, "nll", Ok(nll(&b)))?;
            put(test_name, "ece", ece(&b, cfg.metrics.ece_bins))?;
            put(test_name, "calibration_auroc", calibration_auroc(&b))?;
            let in_scores: Vec<f64> = b.probs().rows().into_iter().map(msp_score).collect();
            for (ood_name, ox) in &oods {
                let op = fit.head.predict_probs(ox.view());
                let out_scores: Vec<f64> = op.rows().into_iter().map(msp_score).collect();
                let r = osr_evaluate(&in_scores, &out_scores)?;
                put(ood_name, "msp.auroc", Ok(r.auroc))?;
            }
        }
        for ((split, metric), vs) in values {
            let name = format!("{metric}@{shots}shot");
            let ok: Result<Vec<f64>, String> = vs.into_iter().collect();
            let vals = match ok {
                Ok(v) => v,
                Err(why) => {
                    out.skip(Task::Fewshot, &ds.name, &split, format!("{name}: {why}"));
                    continue;
                }
            };
            let spec = match metric {
                "nll" => MetricSpec::nll(k),
                "ece" => MetricSpec::unit_lower(),
                _ => MetricSpec::unit_higher(),
            };
            let (mean, std) = mean_std(&vals);
            out.records.push(MetricRecord::new("fewshot", &ds.name, &split, &name, mean, spec));
            let std_spec = MetricSpec::new(false, 0.0, spec.upper_bound - spec.lower_bound);
            out.records
                .push(MetricRecord::new("fewshot", &ds.name, &split, format!("{name}.std"), std, std_spec).with_flag(DESCRIPTIVE));
        }
    }
    Ok(())
}

fn zeroshot_osr(cfg: &RunConfig, ds: &Dataset, out: &mut Out) -> Result<(), PipelineError> {
    let (_, test) = ds.first(SplitRole::Test).expect("checked during planning");
    let in_x = test.embeddings.as_ref().expect("checked during planning");
    let g = match fit_gaussians(cfg, ds, out)? {
        Ok(g) => g,
        Err(why) => {
            out.skip(Task::ZeroshotOsr, &ds.name, "", why);
            return Ok(());
        }
    };
    for (ood_name, ood) in ds.m.splits_with_role(SplitRole::SemanticShift) {
        let Some(out_x) = &ood.embeddings else {
            out.skip(Task::ZeroshotOsr, &ds.name, ood_name, "split has no embeddings");
            continue;
        };
        let site = Site {
            task: Task::ZeroshotOsr,
            name: "zeroshot_osr",
            dataset: &ds.name,
            split: ood_name,
            flags: &[],
        };
        distance_records(&g, &site, in_x.view(), out_x.view(), &[OsrScore::Maha, OsrScore::Rmaha], out)?;
    }
    Ok(())
}

fn active_learning(cfg: &RunConfig, ds: &Dataset, out: &mut Out) -> Result<(), PipelineError> {
    let (x, y) = train_xy(ds);
    let (test_name, test) = ds.first(SplitRole::Test).expect("checked during planning");
    let (tx, ty) = flat_embeddings(test).expect("checked during planning");
    let al = AlConfig {
        seed: cfg.active_learning.seed.wrapping_add(cfg.seed),
        ..cfg.active_learning.clone()
    };
    let curve = al_loop(x, y, tx.view(), ty, ds.k(), &al)?;
    let accs: Vec<f64> = curve.points.iter().map(|p| p.y).collect();
    let last = *accs.last().expect("at least one round");
    let site = Site {
        task: Task::ActiveLearning,
        name: "active_learning",
        dataset: &ds.name,
        split: test_name,
        flags: &[],
    };
    site.push(out, "final_accuracy", last, MetricSpec::unit_higher());
    site.push(out, "mean_accuracy", mean_std(&accs).0, MetricSpec::unit_higher());
    out.curves.insert(
        format!("active_learning/{}/{}", ds.name, al.strategy.as_str()),
        Curve {
            x_label: "num_labels".into(),
            y_label: "accuracy".into(),
            points: curve.points,
        },
    );
    Ok(())
}

fn seeds_used(cfg: &RunConfig, heads: &[HeadInfo]) -> BTreeMap<String, Vec<u64>> {
    let mut m = BTreeMap::new();
    m.insert("run".to_string(), vec![cfg.seed]);
    if cfg.tasks.contains(&Task::Fewshot) {
        m.insert("fewshot".into(), cfg.fewshot.seeds.iter().map(|s| s.wrapping_add(cfg.seed)).collect());
    }
    if cfg.tasks.contains(&Task::ActiveLearning) {
        m.insert("active_learning".into(), vec![cfg.active_learning.seed.wrapping_add(cfg.seed)]);
    }
    if !heads.is_empty() {
        let mut s: Vec<u64> = heads.iter().map(|h| h.seed).collect();
        s.sort_unstable();
        s.dedup();
        m.insert("head".into(), s);
    }
    m
}

/// Runs every task in `cfg` and returns one report per model.
pub fn run(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    let plan = plan(cfg)?;
    let tasks: BTreeSet<Task> = cfg.tasks.iter().copied().collect();
    let hash = cfg.config_hash();

    let mut shared = Out::default();
    shared.skipped.extend(plan.skipped.get("").cloned().unwrap_or_default());
    for (di, ds) in plan.datasets.iter().enumerate() {
        for &task in tasks.iter().filter(|t| !t.uses_model() && **t != Task::Score) {
            if plan.blocked.contains(&(task, di, None)) {
                continue;
            }
            match task {
                Task::Fewshot => fewshot(cfg, ds, &mut shared)?,
                Task::ZeroshotOsr => zeroshot_osr(cfg, ds, &mut shared)?,
                Task::ActiveLearning => active_learning(cfg, ds, &mut shared)?,
                _ => unreachable!(),
            }
        }
    }

    let mut reports = Vec::with_capacity(cfg.models.len());
    for (mi, model) in cfg.models.iter().enumerate() {
        let mut out = Out::default();
        out.skipped.extend(plan.skipped.get(model.name()).cloned().unwrap_or_default());
        let mut heads = Vec::new();
        let mut flags: BTreeSet<String> = BTreeSet::new();
        for (di, ds) in plan.datasets.iter().enumerate() {
            let todo: Vec<Task> = tasks
                .iter()
                .copied()
                .filter(|&t| t.uses_model() && !plan.blocked.contains(&(t, di, Some(mi))))
                .collect();
            if todo.is_empty() {
                continue;
            }
            let (fitted, info) = fit(cfg, model, &plan, ds, &mut out)?;
            let model_flags = match &fitted {
                Fitted::Head(h) => h.flags(),
                Fitted::Logits => Vec::new(),
            };
            heads.extend(info);
            let mut gaussians = None;
            let mut ctx = ModelCtx {
                cfg,
                ds,
                fitted: &fitted,
                flags: &model_flags,
                gaussians: &mut gaussians,
            };
            for task in todo {
                run_model_task(task, &mut ctx, &mut out)?;
            }
        }
        out.extend(shared.clone());
        let seeds = seeds_used(cfg, &heads);
        for r in &out.records {
            flags.extend(r.flags.iter().filter(|f| f.as_str() != DESCRIPTIVE).cloned());
        }
        let mut report = Report::new(
            model.name(),
            Provenance {
                config_hash: hash.clone(),
                version: format!("relkit {}", env!("CARGO_PKG_VERSION")),
                seed: cfg.seed,
                seeds,
                flags: flags.into_iter().collect(),
                heads,
                skipped: out.skipped,
                warnings: out.warnings,
            },
        );
        report.records = out.records;
        report.curves = out.curves;
        report.canonicalize();
        if tasks.contains(&Task::Score) {
            match score_records(&report.model, &hash, &report.records) {
                Ok(s) => report.score = Some(s),
                Err(e) => report.provenance.warnings.push(format!("score: {e}")),
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// `cfg` limited to `tasks`: the requested ones among them, or all of them
/// when the configuration requests none.
fn restricted(cfg: &RunConfig, tasks: &[Task]) -> RunConfig {
    let mut c = cfg.clone();
    let keep: Vec<Task> = cfg.tasks.iter().copied().filter(|t| tasks.contains(t)).collect();
    c.tasks = if keep.is_empty() { tasks.to_vec() } else { keep };
    c
}

/// Accuracy, NLL, Brier and ECE on test and shifted splits, plus the
/// calibration, selective, label-uncertainty and subpopulation tasks.
pub fn run_eval(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    run(&restricted(
        cfg,
        &[Task::Eval, Task::Calibration, Task::Selective, Task::LabelUncertainty, Task::Subpop],
    ))
}

pub fn run_osr(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    run(&restricted(cfg, &[Task::Osr]))
}

pub fn run_fewshot(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    run(&restricted(cfg, &[Task::Fewshot]))
}

pub fn run_zeroshot_osr(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    run(&restricted(cfg, &[Task::ZeroshotOsr]))
}

pub fn run_active_learning(cfg: &RunConfig) -> Result<Vec<Report>, PipelineError> {
    run(&restricted(cfg, &[Task::ActiveLearning]))
}

/// Writes each report to `dir/<model>/`.
pub fn write_reports(reports: &[Report], dir: impl AsRef<std::path::Path>) -> Result<(), PipelineError> {
    for r in reports {
        r.write(dir.as_ref().join(&r.model))?;
    }
    Ok(())
}

/// Fits every trainable model on every dataset and saves it under
/// `output_dir/heads/<dataset>/<model>/`. Returns the directories written.
pub fn train_heads(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let mut c = cfg.clone();
    c.tasks = vec![Task::Eval];
    c.validate()?;
    let datasets = load_datasets(&c)?;
    let trainable: Vec<&ModelSpec> = c
        .models
        .iter()
        .filter(|m| matches!(m, ModelSpec::Head { .. } | ModelSpec::Lbfgs { .. }))
        .collect();
    if trainable.is_empty() {
        return Err(PipelineError::invalid("no head or lbfgs models to train"));
    }
    let mut errs = Vec::new();
    for ds in &datasets {
        for m in &trainable {
            if let Some(why) = model_blocker(m, None, ds) {
                errs.push(format!("model {:?} on dataset {:?}: {why}", m.name(), ds.name));
            }
        }
    }
    if !errs.is_empty() {
        return Err(PipelineError::Validation(errs));
    }
    let plan = Plan {
        datasets,
        saved: BTreeMap::new(),
        blocked: BTreeSet::new(),
        skipped: BTreeMap::new(),
    };
    let mut written = Vec::new();
    for ds in &plan.datasets {
        for m in &trainable {
            let mut out = Out::default();
            let (fitted, info) = fit(&c, m, &plan, ds, &mut out)?;
            for w in out.warnings {
                log::warn!("{w}");
            }
            let Fitted::Head(head) = fitted else { unreachable!("trainable models yield heads") };
            let info = info.expect("trained heads carry info");
            let dir = cfg.output_dir.join("heads").join(&ds.name).join(m.name());
            save_head(
                &TrainedHead {
                    head,
                    seed: info.seed,
                    train_loss: info.train_loss,
                },
                &dir,
            )?;
            written.push(dir);
        }
    }
    Ok(written)
}
