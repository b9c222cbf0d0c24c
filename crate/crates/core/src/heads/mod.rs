//! Trainable last-layer heads over frozen embeddings.
//!
//! Every head maps `[N x D]` embeddings to `[N x K]` class probabilities.
//! Heads with trainable parameters implement [`Differentiable`], which is
//! what the SGD trainer and the finite-difference checker drive.

mod batch_ensemble;
mod ensemble;
mod fewshot;
mod gradcheck;
mod heteroscedastic;
mod io;
mod lbfgs;
mod linear;
mod mc_dropout;
mod mlp;
mod rfgp;
mod train;

pub use batch_ensemble::{BatchEnsembleHead, BeLayer, BeOutput};
pub use ensemble::EnsembleHead;
pub use fewshot::fewshot_sample;
pub use gradcheck::{analytic_gradients, gradient_check, GradCheckReport, DEFAULT_FD_STEP};
pub use heteroscedastic::{HetNoise, HeteroscedasticHead, TEMPERATURE_GRID};
pub use io::{load_head, save_head, HeadDescriptor};
pub use lbfgs::{lbfgs_logreg, LbfgsOptions, LbfgsOutcome};
pub use linear::LinearSoftmaxHead;
pub use mc_dropout::McDropoutHead;
pub use mlp::{Dense, Mlp};
pub use rfgp::{RfgpHead, MEAN_FIELD_FACTOR};
pub use train::{sgd_train, train_head, tune_temperature, LrSchedule, TrainConfig, TrainedHead};

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::NotPositiveDefinite;
use crate::tensor_store::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("GP precision has not been accumulated")]
    PrecisionMissing,
    #[error("line search failed at iteration {iteration} (gradient norm {grad_norm:e})")]
    LineSearch {
        iteration: usize,
        grad_norm: f64,
        last: Box<LinearSoftmaxHead>,
    },
    #[error("class {class:?} has {available} examples, {requested} requested")]
    ClassDeficit {
        class: String,
        available: usize,
        requested: usize,
    },
    #[error(transparent)]
    NotPositiveDefinite(#[from] NotPositiveDefinite),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("descriptor: {0}")]
    Descriptor(String),
}

/// Anything that turns embeddings into class probabilities.
pub trait Classifier {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `[N x K]` rows on the probability simplex.
    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64>;
}

/// Name and weight-decay eligibility of one parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub decay: bool,
}

impl ParamInfo {
    pub fn new(name: impl Into<String>, decay: bool) -> Self {
        Self {
            name: name.into(),
            decay,
        }
    }
}

/// Gradient blocks in the order reported by [`Differentiable::param_info`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// A head whose mean training loss has analytic gradients.
///
/// Stochastic heads draw their randomness up front through
/// [`Differentiable::draw_noise`], so the loss is a deterministic function
/// of the parameters given the draw. This is what lets finite differences
/// check pathwise gradients.
pub trait Differentiable {
    type Noise;

    fn draw_noise(&self, rows: usize, rng: &mut ChaCha8Rng) -> Self::Noise;

    fn param_info(&self) -> Vec<ParamInfo>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], noise: &Self::Noise) -> f64;

    fn loss_and_grad(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        noise: &Self::Noise,
    ) -> (f64, GradientSet);

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeOutputKind {
    /// Output layer shares `W0` and carries its own fast weights.
    #[default]
    Shared,
    /// Each member owns a dense linear-softmax output layer.
    PerMember,
}

fn default_num_features() -> usize {
    256
}
fn default_lengthscale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_train_samples() -> usize {
    10
}
fn default_eval_samples() -> usize {
    1000
}
fn default_members() -> usize {
    4
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_dropout() -> f64 {
    0.1
}
fn default_mc_samples() -> usize {
    32
}

/// Head kind plus hyperparameters, as written in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    Linear,
    Rfgp {
        #[serde(default = "default_num_features")]
        num_features: usize,
        #[serde(default = "default_lengthscale")]
        lengthscale: f64,
        #[serde(default = "default_true")]
        mean_field: bool,
    },
    Heteroscedastic {
        /// Defaults to `min(K - 1, 15)`.
        #[serde(default)]
        rank: Option<usize>,
        /// `None` tunes over [`TEMPERATURE_GRID`] when a validation split
        /// is available and falls back to 1 otherwise.
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default = "default_train_samples")]
        train_samples: usize,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
    },
    BatchEnsemble {
        #[serde(default = "default_members")]
        members: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        output: BeOutputKind,
    },
    McDropout {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_dropout")]
        rate: f64,
        #[serde(default = "default_mc_samples")]
        samples: usize,
    },
    Ensemble {
        members: usize,
        base: Box<HeadSpec>,
    },
}

impl HeadSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadSpec::Linear => "linear",
            HeadSpec::Rfgp { .. } => "rfgp",
            HeadSpec::Heteroscedastic { .. } => "heteroscedastic",
            HeadSpec::BatchEnsemble { .. } => "batch_ensemble",
            HeadSpec::McDropout { .. } => "mc_dropout",
            HeadSpec::Ensemble { .. } => "ensemble",
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: String| Err(HeadError::Config(m));
        match self {
            HeadSpec::Linear => Ok(()),
            HeadSpec::Rfgp {
                num_features,
                lengthscale,
                ..
            } => {
                if *num_features == 0 || !(*lengthscale > 0.0) {
                    return bad(format!(
                        "rfgp needs num_features > 0 and lengthscale > 0, got {num_features}, {lengthscale}"
                    ));
                }
                Ok(())
            }
            HeadSpec::Heteroscedastic {
                temperature,
                train_samples,
                eval_samples,
                ..
            } => {
                if let Some(t) = temperature {
                    if !(*t > 0.0) {
                        return bad(format!("temperature must be positive, got {t}"));
                    }
                }
                if *train_samples == 0 || *eval_samples == 0 {
                    return bad("sample counts must be positive".into());
                }
                Ok(())
            }
            HeadSpec::BatchEnsemble {
                members, hidden, ..
            } => {
                if *members == 0 || hidden.contains(&0) {
                    return bad("batch ensemble needs members > 0 and non-zero widths".into());
                }
                Ok(())
            }
            HeadSpec::McDropout {
                hidden,
                rate,
                samples,
            } => {
                if !(0.0..1.0).contains(rate) || *samples == 0 || hidden.contains(&0) {
                    return bad(format!("mc dropout needs rate in [0, 1) and samples > 0, got {rate}, {samples}"));
                }
                Ok(())
            }
            HeadSpec::Ensemble { members, base } => {
                if *members == 0 {
                    return bad("ensemble needs at least one member".into());
                }
                base.validate()
            }
        }
    }
}

/// A head of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear(LinearSoftmaxHead),
    Rfgp(RfgpHead),
    Heteroscedastic(HeteroscedasticHead),
    BatchEnsemble(BatchEnsembleHead),
    McDropout(McDropoutHead),
    Ensemble(EnsembleHead),
}

impl Head {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Head::Linear(_) => "linear",
            Head::Rfgp(_) => "rfgp",
            Head::Heteroscedastic(_) => "heteroscedastic",
            Head::BatchEnsemble(_) => "batch_ensemble",
            Head::McDropout(_) => "mc_dropout",
            Head::Ensemble(_) => "ensemble",
        }
    }

    fn inner(&self) -> &dyn Classifier {
        match self {
            Head::Linear(h) => h,
            Head::Rfgp(h) => h,
            Head::Heteroscedastic(h) => h,
            Head::BatchEnsemble(h) => h,
            Head::McDropout(h) => h,
            Head::Ensemble(h) => h,
        }
    }

    /// Interpretation flags carried into reports.
    pub fn flags(&self) -> Vec<String> {
        match self {
            Head::Rfgp(h) if h.mean_field => vec!["mean_field_gp".into()],
            Head::Ensemble(e) => {
                let mut f: Vec<String> = e.members.iter().flat_map(Head::flags).collect();
                f.sort();
                f.dedup();
                f
            }
            _ => Vec::new(),
        }
    }
}

impl Classifier for Head {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.inner().predict_probs(x)
    }
}

/// Mean cross-entropy of `logits` against `labels`, plus `dL/dlogits`.
pub(crate) fn softmax_xent(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = crate::linalg::softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += crate::linalg::logsumexp(logits.row(i)) - logits[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

pub(crate) fn xent_loss(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| crate::linalg::logsumexp(logits.row(i)) - logits[[i, y]])
        .sum();
    total / logits.nrows() as f64
}

pub(crate) fn check_inputs(x: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<(), HeadError> {
    if x.nrows() != labels.len() {
        return Err(HeadError::Shape(format!(
            "{} embedding rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(HeadError::Shape("no training rows".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(HeadError::Shape(format!("label {l} outside [0, {k})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_defaults_from_json() {
        let s: HeadSpec = serde_json::from_str(r#"{"kind": "rfgp"}"#).unwrap();
        assert_eq!(
            s,
            HeadSpec::Rfgp {
                num_features: 256,
                lengthscale: 1.0,
                mean_field: true
            }
        );
        let s: HeadSpec =
            serde_json::from_str(r#"{"kind": "ensemble", "members": 3, "base": {"kind": "linear"}}"#)
                .unwrap();
        assert_eq!(s.kind_name(), "ensemble");
        assert!(serde_json::from_str::<HeadSpec>(r#"{"kind": "rfgp", "oops": 1}"#).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(HeadSpec::McDropout {
            hidden: vec![8],
            rate: 1.0,
            samples: 4
        }
        .validate()
        .is_err());
        assert!(HeadSpec::Ensemble {
            members: 0,
            base: Box::new(HeadSpec::Linear)
        }
        .validate()
        .is_err());
    }
}
