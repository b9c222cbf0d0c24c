//! Run configuration as read from JSON.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::active_learning::AlConfig;
use crate::heads::{HeadSpec, LbfgsOptions, TrainConfig};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::ood::Ridge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Eval,
    Calibration,
    Selective,
    Osr,
    LabelUncertainty,
    Subpop,
    Fewshot,
    ZeroshotOsr,
    ActiveLearning,
    Score,
}

impl Task {
    pub const ALL: [Task; 10] = [
        Task::Eval,
        Task::Calibration,
        Task::Selective,
        Task::Osr,
        Task::LabelUncertainty,
        Task::Subpop,
        Task::Fewshot,
        Task::ZeroshotOsr,
        Task::ActiveLearning,
        Task::Score,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Eval => "eval",
            Task::Calibration => "calibration",
            Task::Selective => "selective",
            Task::Osr => "osr",
            Task::LabelUncertainty => "label_uncertainty",
            Task::Subpop => "subpop",
            Task::Fewshot => "fewshot",
            Task::ZeroshotOsr => "zeroshot_osr",
            Task::ActiveLearning => "active_learning",
            Task::Score => "score",
        }
    }

    /// Tasks whose records depend on the evaluated model. The rest work on
    /// raw embeddings and give the same records for every model.
    pub fn uses_model(self) -> bool {
        matches!(
            self,
            Task::Eval | Task::Calibration | Task::Selective | Task::Osr | Task::LabelUncertainty | Task::Subpop
        )
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsrScore {
    Msp,
    Entropy,
    Maxlogit,
    Maha,
    Rmaha,
}

impl OsrScore {
    pub const ALL: [OsrScore; 5] = [OsrScore::Msp, OsrScore::Entropy, OsrScore::Maxlogit, OsrScore::Maha, OsrScore::Rmaha];

    pub fn as_str(self) -> &'static str {
        match self {
            OsrScore::Msp => "msp",
            OsrScore::Entropy => "entropy",
            OsrScore::Maxlogit => "maxlogit",
            OsrScore::Maha => "maha",
            OsrScore::Rmaha => "rmaha",
        }
    }
}

fn logits_name() -> String {
    "logits".into()
}

/// Where a model's predictions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Logits stored in the manifest.
    Logits {
        #[serde(default = "logits_name")]
        name: String,
    },
    /// A head trained on the train split's embeddings.
    Head {
        name: String,
        spec: HeadSpec,
        #[serde(default)]
        train: TrainConfig,
    },
    /// Multinomial logistic regression fitted by L-BFGS.
    Lbfgs {
        name: String,
        #[serde(default)]
        options: LbfgsOptions,
    },
    /// A head directory written by `train-head`.
    Saved { name: String, path: PathBuf },
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Logits { name }
            | ModelSpec::Head { name, .. }
            | ModelSpec::Lbfgs { name, .. }
            | ModelSpec::Saved { name, .. } => name,
        }
    }

    pub fn uses_embeddings(&self) -> bool {
        !matches!(self, ModelSpec::Logits { .. })
    }
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::Logits { name: logits_name() }]
}
fn default_ece_bins() -> usize {
    DEFAULT_ECE_BINS
}
fn default_budgets() -> Vec<f64> {
    vec![0.005, 0.01, 0.02, 0.05]
}
fn default_percentiles() -> Vec<f64> {
    vec![10.0, 25.0, 50.0]
}
fn default_osr_scores() -> Vec<OsrScore> {
    OsrScore::ALL.to_vec()
}
fn default_shots() -> Vec<usize> {
    vec![1, 5, 10, 25]
}
fn default_fewshot_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// 100 evenly spaced rates from 0 to 0.99.
pub fn default_rejection_rates() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    /// Oracle referral budgets, as fractions of the split.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    #[serde(default = "default_rejection_rates")]
    pub rejection_rates: Vec<f64>,
    /// Percentiles of per-group accuracy, in `[0, 100]`.
    #[serde(default = "default_percentiles")]
    pub percentiles: Vec<f64>,
    #[serde(default = "default_osr_scores")]
    pub osr_scores: Vec<OsrScore>,
    #[serde(default)]
    pub ridge: Ridge,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            ece_bins: default_ece_bins(),
            budgets: default_budgets(),
            rejection_rates: default_rejection_rates(),
            percentiles: default_percentiles(),
            osr_scores: default_osr_scores(),
            ridge: Ridge::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotOptions {
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    /// Sampling seeds; each is offset by the run seed.
    #[serde(default = "default_fewshot_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
}

impl Default for FewshotOptions {
    fn default() -> Self {
        Self {
            shots: default_shots(),
            seeds: default_fewshot_seeds(),
            lbfgs: LbfgsOptions::default(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest paths, relative to the configuration file.
    pub manifests: Vec<PathBuf>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub fewshot: FewshotOptions,
    #[serde(default)]
    pub active_learning: AlConfig,
    /// Run seed, added to every seed derived from the configuration.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Skip tasks with missing prerequisites instead of refusing to run.
    #[serde(default)]
    pub allow_missing: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::invalid(format!("configuration: {e}")))
    }

    /// Reads a configuration and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.manifests.iter_mut().for_each(join);
        for m in &mut self.models {
            if let ModelSpec::Saved { path, .. } = m {
                join(path);
            }
        }
        join(&mut self.output_dir);
    }

    /// Hex SHA-256 of the configuration with paths reduced to file names,
    /// so relocating a run directory keeps its hash. The task list and skip
    /// policy are left out: tasks are independent, so reports from separate
    /// task runs of one configuration can be scored together.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.tasks.clear();
        c.allow_missing = false;
        let strip = |p: &mut PathBuf| {
            if let Some(name) = p.file_name() {
                *p = PathBuf::from(name);
            }
        };
        c.manifests.iter_mut().for_each(strip);
        for m in &mut c.models {
            if let ModelSpec::Saved { path, .. } = m {
                strip(path);
            }
        }
        let text = serde_json::to_string(&c).expect("configuration serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        if self.manifests.is_empty() {
            errs.push("no manifests listed".to_string());
        }
        if self.tasks.is_empty() {
            errs.push("no tasks requested".to_string());
        }
        if self.models.is_empty() {
            errs.push("no models listed".to_string());
        }
        let mut names: Vec<&str> = self.models.iter().map(ModelSpec::name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            errs.push(format!("model name {:?} is used twice", w[0]));
        }
        for n in &names {
            if n.is_empty() || n.contains(['/', '\\']) || *n == "." || *n == ".." {
                errs.push(format!("model name {n:?} is not a valid directory name"));
            }
        }
        for m in &self.models {
            if let ModelSpec::Head { spec, train, name } = m {
                if let Err(e) = spec.validate().and_then(|_| train.validate()) {
                    errs.push(format!("model {name:?}: {e}"));
                }
            }
        }
        let o = &self.metrics;
        if o.ece_bins == 0 {
            errs.push("ece_bins must be positive".into());
        }
        if o.budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            errs.push("budgets must lie in [0, 1]".into());
        }
        if o.rejection_rates.len() < 2
            || o.rejection_rates.iter().any(|r| !(0.0..=0.99).contains(r))
            || o.rejection_rates.windows(2).any(|w| w[1] <= w[0])
        {
            errs.push("rejection_rates must be at least two increasing values in [0, 0.99]".into());
        }
        if o.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            errs.push("percentiles must lie in [0, 100]".into());
        }
        if self.tasks.contains(&Task::Fewshot) {
            if self.fewshot.shots.is_empty() || self.fewshot.shots.contains(&0) {
                errs.push("fewshot.shots must be non-empty and positive".into());
            }
            if self.fewshot.seeds.is_empty() {
                errs.push("fewshot.seeds must be non-empty".into());
            }
        }
        if self.tasks.contains(&Task::ActiveLearning) {
            if let Err(e) = self.active_learning.sizes(2) {
                errs.push(format!("active_learning: {e}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Validation(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"manifests": ["m.json"], "tasks": ["eval", "osr"]}"#).unwrap();
        assert_eq!(c.models, default_models());
        assert_eq!(c.metrics.rejection_rates.len(), 100);
        assert_eq!(c.metrics.rejection_rates[99], 0.99);
        assert_eq!(c.metrics.budgets, vec![0.005, 0.01, 0.02, 0.05]);
        assert_eq!(c.fewshot.shots, vec![1, 5, 10, 25]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_and_tasks_are_rejected() {
        assert!(RunConfig::from_json(r#"{"manifests": [], "tasks": [], "extra": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"manifests": [], "tasks": ["train"]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"manifests": [], "tasks": [], "models": [{"kind": "logits", "x": 1}]}"#).is_err());
    }

    #[test]
    fn model_specs_parse() {
        let c = RunConfig::from_json(
            r#"{"manifests": ["m.json"], "tasks": ["eval"], "models": [
                {"kind": "head", "name": "gp", "spec": {"kind": "rfgp", "num_features": 32}},
                {"kind": "lbfgs", "name": "lr", "options": {"l2": 0.01}},
                {"kind": "saved", "name": "old", "path": "heads/old"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(c.models.len(), 3);
        assert!(matches!(&c.models[1], ModelSpec::Lbfgs { options, .. } if options.l2 == 0.01));
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut c = RunConfig::from_json(r#"{"manifests": [], "tasks": []}"#).unwrap();
        c.metrics.ece_bins = 0;
        match c.validate() {
            Err(PipelineError::Validation(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_model_names_are_rejected() {
        let c = RunConfig::from_json(
            r#"{"manifests": ["m"], "tasks": ["eval"], "models": [{"kind": "logits"}, {"kind": "lbfgs", "name": "logits"}]}"#,
        )
        .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_location_but_not_content() {
        let a = RunConfig::from_json(r#"{"manifests": ["a/m.json"], "tasks": ["eval"]}"#).unwrap();
        let mut b = a.clone();
        b.resolve_paths(Path::new("/elsewhere"));
        assert_eq!(a.config_hash(), b.config_hash());
        b.tasks.push(Task::Osr);
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
    }
}
