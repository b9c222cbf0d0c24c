use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use relkit::metrics::{MetricRecord, MetricSpec};
use relkit::pipelines::{
    run, run_eval, run_fewshot, run_osr, run_score, run_zeroshot_osr, train_heads, write_reports, Area, PipelineError,
    Provenance, Report, RunConfig, Task, FLAG_DEGENERATE, FLAG_OC_AUROC, FLAG_SEQUENCE_ENTROPY,
};
use relkit::synthetic::golden_manifest;
use relkit::tensor_store::{DatasetManifest, Labels, Logits, Split, SplitRole};
use serde_json::json;
use tempfile::TempDir;

fn split(role: SplitRole, emb: Option<Array2<f64>>, logits: Option<Array2<f64>>, labels: Vec<usize>) -> Split {
    Split {
        role,
        embeddings: emb,
        logits: logits.map(Logits::Flat),
        labels: Labels::Flat(labels),
        soft_labels: None,
        groups: None,
    }
}

fn manifest(name: &str, k: usize, splits: Vec<(&str, Split)>) -> DatasetManifest {
    DatasetManifest {
        name: name.into(),
        classes: (0..k).map(|i| format!("c{i}")).collect(),
        ood_classes: Vec::new(),
        splits: splits.into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
    }
}

fn config(dir: &Path, manifests: &[PathBuf], extra: serde_json::Value) -> RunConfig {
    let mut v = json!({
        "manifests": manifests,
        "tasks": ["eval"],
        "output_dir": dir.join("out"),
    });
    for (k, val) in extra.as_object().expect("object") {
        v[k] = val.clone();
    }
    RunConfig::from_json(&v.to_string()).expect("valid config")
}

fn golden(dir: &Path) -> PathBuf {
    golden_manifest(0).save(dir.join("golden")).unwrap()
}

fn one_hot_logits(labels: &[usize], k: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), k), |(i, j)| if labels[i] == j { scale } else { 0.0 })
}

fn rec<'a>(r: &'a Report, task: &str, split: &str, metric: &str) -> &'a MetricRecord {
    r.records
        .iter()
        .find(|x| x.task == task && x.split == split && x.metric == metric)
        .unwrap_or_else(|| panic!("no record {task}/{split}/{metric}"))
}

#[test]
fn perfect_predictor_scores_perfectly_on_every_split() {
    let tmp = TempDir::new().unwrap();
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let l = one_hot_logits(&labels, 3, 60.0);
    let m = manifest(
        "perfect",
        3,
        vec![
            ("test", split(SplitRole::Test, None, Some(l.clone()), labels.clone())),
            ("shifted", split(SplitRole::CovariateShift, None, Some(l), labels)),
        ],
    );
    let p = m.save(tmp.path().join("m")).unwrap();
    let reports = run_eval(&config(tmp.path(), &[p], json!({"tasks": ["eval", "calibration"]}))).unwrap();
    let r = &reports[0];
    for (task, split) in [("in_distribution", "test"), ("covariate_shift", "shifted")] {
        assert_eq!(rec(r, task, split, "accuracy").value, 1.0);
        assert!(rec(r, task, split, "nll").value < 1e-12);
        assert!(rec(r, task, split, "ece").value < 1e-12);
    }
    // Every prediction is correct, so calibration AUROC is undefined.
    assert!(r.provenance.skipped.iter().any(|s| s.reason.contains("calibration_auroc")));
}

#[test]
fn binary_tasks_add_auroc_and_auprc() {
    let tmp = TempDir::new().unwrap();
    let labels: Vec<usize> = (0..40).map(|i| (i * 7 % 5 < 2) as usize).collect();
    let logits = Array2::from_shape_fn((40, 2), |(i, j)| if j == 1 { (i % 9) as f64 * 0.3 - 1.0 } else { 0.0 });
    let bin = manifest("bin", 2, vec![("test", split(SplitRole::Test, None, Some(logits), labels))]);
    let p = bin.save(tmp.path().join("bin")).unwrap();
    let cfg = config(tmp.path(), &[p], json!({"tasks": ["eval", "selective"]}));
    let r = &run(&cfg).unwrap()[0];
    assert!(r.record("in_distribution", "bin", "test", "auroc").is_some());
    assert!(r.record("in_distribution", "bin", "test", "auprc").is_some());
    let oc = r.record("selective", "bin", "test", "oc_auroc@0.05").unwrap();
    assert!(oc.has_flag(FLAG_OC_AUROC));
    assert!(r.record("selective", "bin", "test", "rejection_auc.auroc").is_some());

    let g = golden(tmp.path());
    let r = &run_eval(&config(tmp.path(), &[g], json!({}))).unwrap()[0];
    assert!(r.records.iter().all(|x| x.metric != "auroc" && x.metric != "auprc"));
    assert!(r.record("in_distribution", "golden", "test", "accuracy").is_some());
}

#[test]
fn golden_run_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    let cfg = config(
        tmp.path(),
        &[p],
        json!({
            "tasks": ["eval", "calibration", "selective", "osr", "label_uncertainty", "subpop",
                      "fewshot", "zeroshot_osr", "active_learning", "score"],
            "models": [{"kind": "logits"}, {"kind": "head", "name": "het",
                        "spec": {"kind": "heteroscedastic", "eval_samples": 50}, "train": {"epochs": 3}}],
            "fewshot": {"shots": [1, 5]}
        }),
    );
    let files = |sub: &str| -> BTreeMap<PathBuf, Vec<u8>> {
        let dir = tmp.path().join(sub);
        write_reports(&run(&cfg).unwrap(), &dir).unwrap();
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(&dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    };
    let a = files("a");
    let b = files("b");
    assert!(a.len() > 6);
    assert_eq!(a, b);
}

#[test]
fn osr_extremes() {
    let tmp = TempDir::new().unwrap();
    let n = 20;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let confident = one_hot_logits(&labels, 2, 8.0);
    let flat = Array2::zeros((n, 2));
    let emb_in = Array2::from_shape_fn((n, 2), |(i, j)| (i % 2 == j) as u8 as f64 + 0.01 * i as f64);
    let emb_out = emb_in.mapv(|v| v + 100.0);
    let m = manifest(
        "disjoint",
        2,
        vec![
            ("train", split(SplitRole::Train, Some(emb_in.clone()), None, labels.clone())),
            ("test", split(SplitRole::Test, Some(emb_in.clone()), Some(confident.clone()), labels.clone())),
            ("far", split(SplitRole::SemanticShift, Some(emb_out), Some(flat), vec![0; n])),
            ("same", split(SplitRole::SemanticShift, Some(emb_in), Some(confident), labels)),
        ],
    );
    let p = m.save(tmp.path().join("m")).unwrap();
    let r = &run_osr(&config(tmp.path(), &[p], json!({"tasks": ["osr"]}))).unwrap()[0];
    for s in ["msp", "entropy", "maxlogit", "maha", "rmaha"] {
        assert_eq!(rec(r, "osr", "far", &format!("{s}.auroc")).value, 1.0, "{s}");
        assert_eq!(rec(r, "osr", "same", &format!("{s}.auroc")).value, 0.5, "{s}");
    }
}

#[test]
fn distance_scores_without_embeddings_are_skipped_with_a_reason() {
    let tmp = TempDir::new().unwrap();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let l = one_hot_logits(&labels, 3, 2.0);
    let m = manifest(
        "noemb",
        3,
        vec![
            ("test", split(SplitRole::Test, None, Some(l.clone()), labels.clone())),
            ("ood", split(SplitRole::SemanticShift, None, Some(l * 0.1), labels)),
        ],
    );
    let p = m.save(tmp.path().join("m")).unwrap();
    let r = &run(&config(tmp.path(), &[p], json!({"tasks": ["osr"]}))).unwrap()[0];
    assert!(r.record("osr", "noemb", "ood", "msp.auroc").is_some());
    assert!(r.record("osr", "noemb", "ood", "maha.auroc").is_none());
    let skip = r.provenance.skipped.iter().find(|s| s.reason.starts_with("maha")).unwrap();
    assert_eq!((skip.task.as_str(), skip.split.as_str()), ("osr", "ood"));
}

#[test]
fn missing_prerequisites_fail_validation_unless_skipping_is_allowed() {
    let tmp = TempDir::new().unwrap();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let m = manifest(
        "bare",
        3,
        vec![("test", split(SplitRole::Test, None, Some(one_hot_logits(&labels, 3, 1.0)), labels))],
    );
    let p = m.save(tmp.path().join("m")).unwrap();
    let tasks = json!(["eval", "osr", "subpop", "fewshot"]);
    let strict = config(tmp.path(), &[p.clone()], json!({"tasks": tasks}));
    match run(&strict) {
        Err(e @ PipelineError::Validation(_)) => {
            assert_eq!(e.exit_code(), 2);
            let PipelineError::Validation(msgs) = e else { unreachable!() };
            assert_eq!(msgs.len(), 3, "{msgs:?}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
    let lenient = config(tmp.path(), &[p], json!({"tasks": tasks, "allow_missing": true}));
    let r = &run(&lenient).unwrap()[0];
    let skipped: Vec<&str> = r.provenance.skipped.iter().map(|s| s.task.as_str()).collect();
    assert_eq!(skipped, vec!["fewshot", "osr", "subpop"]);
    assert!(r.record("in_distribution", "bare", "test", "accuracy").is_some());
}

#[test]
fn unreadable_inputs_are_validation_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &[tmp.path().join("missing.json")], json!({}));
    assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
    let p = golden(tmp.path());
    let cfg = config(tmp.path(), &[p], json!({"models": [{"kind": "saved", "name": "s", "path": tmp.path().join("nope")}]}));
    assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn tasks_are_independent() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    let models = json!([{"kind": "logits"}, {"kind": "head", "name": "mc",
        "spec": {"kind": "mc_dropout", "hidden": [8], "samples": 4}, "train": {"epochs": 2}}]);
    let all = json!(["eval", "osr", "fewshot", "selective", "active_learning", "zeroshot_osr"]);
    let full = run(&config(tmp.path(), &[p.clone()], json!({"tasks": all, "models": models, "fewshot": {"shots": [2]}}))).unwrap();
    for only in ["eval", "osr", "fewshot", "zeroshot_osr"] {
        let part = run(&config(tmp.path(), &[p.clone()], json!({"tasks": [only], "models": models, "fewshot": {"shots": [2]}}))).unwrap();
        for (f, q) in full.iter().zip(&part) {
            assert_eq!(f.provenance.config_hash, q.provenance.config_hash);
            for r in &q.records {
                let same = f.record(&r.task, &r.dataset, &r.split, &r.metric).unwrap();
                assert_eq!(same, r, "{only}: {}/{}", r.task, r.metric);
            }
        }
    }
}

#[test]
fn full_shot_fewshot_reproduces_eval_accuracy() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    // The golden train split has 40 examples per class.
    let cfg = config(
        tmp.path(),
        &[p],
        json!({"tasks": ["eval", "fewshot"], "models": [{"kind": "lbfgs", "name": "probe"}],
               "fewshot": {"shots": [40], "seeds": [7]}}),
    );
    let r = &run(&cfg).unwrap()[0];
    let eval = rec(r, "in_distribution", "test", "accuracy").value;
    let few = rec(r, "fewshot", "test", "accuracy@40shot").value;
    assert!((eval - few).abs() <= 1e-9, "{eval} vs {few}");
    assert_eq!(rec(r, "fewshot", "test", "accuracy@40shot.std").value, 0.0);
}

#[test]
fn fewshot_reports_spread_across_seeds() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    let cfg = config(tmp.path(), &[p], json!({"tasks": ["fewshot"], "fewshot": {"shots": [1, 3], "seeds": [0, 1, 2, 3]}}));
    let r = &run_fewshot(&cfg).unwrap()[0];
    for shots in [1, 3] {
        let std = rec(r, "fewshot", "test", &format!("accuracy@{shots}shot.std"));
        assert!(std.has_flag("descriptive"));
        assert!(std.value >= 0.0);
        assert!(r.record("fewshot", "golden", "ood", &format!("msp.auroc@{shots}shot")).is_some());
    }
    assert_eq!(r.provenance.seeds["fewshot"], vec![0, 1, 2, 3]);
}

#[test]
fn zeroshot_identical_sets_and_single_class_training() {
    let tmp = TempDir::new().unwrap();
    let n = 30;
    let emb = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64 / 3.0);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let m = manifest(
        "same",
        2,
        vec![
            ("train", split(SplitRole::Train, Some(emb.clone()), None, labels.clone())),
            ("test", split(SplitRole::Test, Some(emb.clone()), None, labels.clone())),
            ("ood", split(SplitRole::SemanticShift, Some(emb.clone()), None, labels)),
        ],
    );
    let p = m.save(tmp.path().join("same")).unwrap();
    let r = &run_zeroshot_osr(&config(tmp.path(), &[p], json!({"tasks": ["zeroshot_osr"]}))).unwrap()[0];
    assert_eq!(rec(r, "zeroshot_osr", "ood", "maha.auroc").value, 0.5);
    assert_eq!(rec(r, "zeroshot_osr", "ood", "rmaha.auroc").value, 0.5);

    let one = manifest(
        "one",
        2,
        vec![
            ("train", split(SplitRole::Train, Some(emb.clone()), None, vec![0; n])),
            ("test", split(SplitRole::Test, Some(emb.clone()), None, vec![0; n])),
            ("ood", split(SplitRole::SemanticShift, Some(emb.mapv(|v| v + 5.0)), None, vec![0; n])),
        ],
    );
    let p = one.save(tmp.path().join("one")).unwrap();
    let r = &run(&config(tmp.path(), &[p], json!({"tasks": ["zeroshot_osr"]}))).unwrap()[0];
    assert!(rec(r, "zeroshot_osr", "ood", "rmaha.auroc").has_flag(FLAG_DEGENERATE));
    assert!(!rec(r, "zeroshot_osr", "ood", "maha.auroc").has_flag(FLAG_DEGENERATE));
    assert!(r.provenance.warnings.iter().any(|w| w.contains("degenerate")));
}

#[test]
fn sequence_osr_uses_the_any_token_rule() {
    let tmp = TempDir::new().unwrap();
    // Classes a, b, ood; padding id 3. Sequences containing an OOD token get
    // flat step distributions, the rest confident ones.
    let labels = ndarray::array![[0, 1, 3], [1, 1, 0], [0, 2, 3], [2, 3, 3], [1, 0, 1], [0, 0, 2]];
    let (n, len) = labels.dim();
    let mut logits = Array3::zeros((n, len, 3));
    for i in 0..n {
        let ood = labels.row(i).iter().any(|&y| y == 2);
        for l in 0..len {
            let y = labels[[i, l]].min(2);
            logits[[i, l, y]] = if ood { 0.1 } else { 5.0 };
        }
    }
    let m = DatasetManifest {
        name: "seq".into(),
        classes: vec!["a".into(), "b".into(), "ood".into()],
        ood_classes: vec![2],
        splits: [(
            "test".to_string(),
            Split {
                role: SplitRole::Test,
                embeddings: None,
                logits: Some(Logits::Sequence(logits)),
                labels: Labels::Sequence(labels),
                soft_labels: None,
                groups: None,
            },
        )]
        .into_iter()
        .collect(),
    };
    let p = m.save(tmp.path().join("seq")).unwrap();
    let r = &run(&config(tmp.path(), &[p], json!({"tasks": ["osr", "eval"]}))).unwrap()[0];
    let auroc = rec(r, "osr", "test", "sequence_entropy.auroc");
    assert_eq!(auroc.value, 1.0);
    assert!(auroc.has_flag(FLAG_SEQUENCE_ENTROPY));
    // Token-level eval ignores padding: 13 real tokens, all argmax-correct.
    assert_eq!(rec(r, "in_distribution", "test", "accuracy").value, 1.0);
}

#[test]
fn score_matches_hand_normalization() {
    let rec = |task: &str, ds: &str, metric: &str, v: f64, spec: MetricSpec| MetricRecord::new(task, ds, "test", metric, v, spec);
    let mut report = Report::new(
        "m",
        Provenance {
            config_hash: "h".into(),
            ..Default::default()
        },
    );
    report.records = vec![
        rec("in_distribution", "a", "accuracy", 0.8, MetricSpec::unit_higher()),
        rec("in_distribution", "a", "nll", 10f64.ln() * 0.4, MetricSpec::nll(10)),
        rec("calibration", "a", "calibration_auroc", 0.7, MetricSpec::unit_higher()),
        rec("osr", "b", "msp.auroc", 0.9, MetricSpec::unit_higher()),
        rec("fewshot", "b", "ece@1shot", 0.25, MetricSpec::unit_lower()),
    ];
    let s = run_score(&[report]).unwrap();
    // Dataset a: (80 + 60 + 70) / 3 = 70; dataset b: (90 + 75) / 2 = 82.5.
    assert!((s.datasets["a"] - 70.0).abs() < 1e-12);
    assert!((s.datasets["b"] - 82.5).abs() < 1e-12);
    assert!((s.overall - 76.25).abs() < 1e-12);
    // Uncertainty: a -> 70, b -> 90, mean 80.
    assert!((s.areas[&Area::Uncertainty].score.unwrap() - 80.0).abs() < 1e-12);
    assert!((s.areas[&Area::RobustGeneralization].score.unwrap() - 70.0).abs() < 1e-12);
    assert!((s.areas[&Area::Adaptation].score.unwrap() - 75.0).abs() < 1e-12);
}

#[test]
fn saved_heads_reproduce_trained_heads() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    let head = json!({"kind": "head", "name": "be", "spec": {"kind": "batch_ensemble", "members": 2, "hidden": [6]},
                      "train": {"epochs": 3}});
    let cfg = config(tmp.path(), &[p.clone()], json!({"models": [head]}));
    let dirs = train_heads(&cfg).unwrap();
    assert_eq!(dirs, vec![tmp.path().join("out/heads/golden/be")]);
    let trained = &run(&cfg).unwrap()[0];
    let saved = config(tmp.path(), &[p], json!({"models": [{"kind": "saved", "name": "be", "path": dirs[0]}]}));
    let loaded = &run(&saved).unwrap()[0];
    assert_eq!(trained.records, loaded.records);
}

#[test]
fn score_task_attaches_a_summary() {
    let tmp = TempDir::new().unwrap();
    let p = golden(tmp.path());
    let cfg = config(tmp.path(), &[p], json!({"tasks": ["eval", "osr", "score"]}));
    let r = &run(&cfg).unwrap()[0];
    let s = r.score.as_ref().unwrap();
    assert!(s.overall > 0.0 && s.overall < 100.0);
    assert_eq!(s.areas[&Area::Adaptation].score, None);
    assert!(s.flags.iter().any(|f| f == "area_absent:adaptation"));
    let only_score = config(tmp.path(), &[], json!({"tasks": ["score"]}));
    assert_eq!(run(&only_score).unwrap_err().exit_code(), 2);
    assert_eq!(Task::Score.as_str(), "score");
}

#[test]
fn exporter_style_f32_and_i32_tensors_load_and_evaluate() {
    use relkit::tensor_store::{load_manifest, save_tensor, Tensor};
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let n = 24;
    let (d, k) = (5, 3);
    let emb: Vec<f32> = (0..n * d).map(|i| ((i * 37 % 17) as f32) / 4.0).collect();
    let logits: Vec<f32> = (0..n * k).map(|i| ((i * 11 % 7) as f32) - 3.0).collect();
    let labels: Vec<i32> = (0..n as i32).map(|i| i % 3).collect();
    for (split, rows) in [("train", n), ("test", n)] {
        save_tensor(&Tensor::from_f32(vec![rows, d], emb.clone()).unwrap(), dir.join(format!("{split}_emb.ubt"))).unwrap();
        save_tensor(&Tensor::from_f32(vec![rows, k], logits.clone()).unwrap(), dir.join(format!("{split}_logits.ubt")))
            .unwrap();
        save_tensor(&Tensor::from_i32(vec![rows], labels.clone()).unwrap(), dir.join(format!("{split}_labels.ubt"))).unwrap();
    }
    let doc = json!({
        "name": "exported",
        "classes": ["x", "y", "z"],
        "splits": {
            "train": {"role": "train", "embeddings": "train_emb.ubt", "logits": "train_logits.ubt", "labels": "train_labels.ubt"},
            "test": {"role": "test", "embeddings": "test_emb.ubt", "logits": "test_logits.ubt", "labels": "test_labels.ubt"}
        }
    });
    let path = dir.join("manifest.json");
    fs::write(&path, doc.to_string()).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.splits["test"].embeddings.as_ref().unwrap().dim(), (n, d));
    let cfg = config(dir, &[path], json!({"models": [{"kind": "logits"}, {"kind": "lbfgs", "name": "probe"}]}));
    let reports = run_eval(&cfg).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.record("in_distribution", "exported", "test", "accuracy").is_some()));
}
