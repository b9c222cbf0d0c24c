use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_inputs, BatchEnsembleHead, Classifier, Differentiable, EnsembleHead, Head, HeadError, HeadSpec,
    HeteroscedasticHead, LinearSoftmaxHead, McDropoutHead, Mlp, RfgpHead, TEMPERATURE_GRID,
};
use crate::metrics::{nll, PredictionBatch};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}

/// SGD with momentum: `v <- mu v + g + wd theta`, `theta <- theta - lr_t v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(HeadError::Config(format!(
                "need lr > 0, momentum in [0, 1), weight_decay >= 0 and batch_size > 0, got {}, {}, {}, {}",
                self.lr, self.momentum, self.weight_decay, self.batch_size
            )));
        }
        Ok(())
    }

    fn rate(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (PI * step as f64 / total as f64).cos()),
        }
    }

    pub(crate) fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Configuration for ensemble member `m`.
    pub fn for_member(&self, m: usize) -> Self {
        Self {
            seed: self.seed.wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..self.clone()
        }
    }
}

/// Runs mini-batch SGD in place and returns the mean loss of the last
/// epoch, or `None` for zero epochs.
pub fn sgd_train<H: Differentiable>(
    head: &mut H,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<f64>, HeadError> {
    cfg.validate()?;
    let n = x.nrows();
    let info = head.param_info();
    let mut velocity: Vec<Vec<f64>> = head.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut shuffle = cfg.rng(SHUFFLE_STREAM);
    let mut noise_rng = cfg.rng(NOISE_STREAM);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut last = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let noise = head.draw_noise(chunk.len(), &mut noise_rng);
            let (loss, grads) = head.loss_and_grad(xb.view(), &yb, &noise);
            step += 1;
            if !loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(HeadError::Diverged { step, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            let lr = cfg.rate(step - 1, total_steps);
            for (((theta, v), (_, g)), pi) in head
                .params_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(&grads.blocks)
                .zip(&info)
            {
                let wd = if pi.decay { cfg.weight_decay } else { 0.0 };
                for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi + wd * *t;
                    *t -= lr * *vi;
                }
            }
        }
        last = Some(epoch_loss / n as f64);
    }
    if let Some(loss) = last {
        if head.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(HeadError::Diverged { step, loss });
        }
    }
    Ok(last)
}

/// A trained head with its training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: Head,
    pub seed: u64,
    pub train_loss: Option<f64>,
}

/// Initializes a head from `spec` and trains it on `(x, labels)`.
///
/// RFGP heads get their Laplace precision accumulated over the training
/// features after the gradient phase.
pub fn train_head(
    spec: &HeadSpec,
    x: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainedHead, HeadError> {
    spec.validate()?;
    cfg.validate()?;
    check_inputs(x, labels, num_classes)?;
    if num_classes < 2 {
        return Err(HeadError::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let d = x.ncols();
    let mut init = cfg.rng(INIT_STREAM);
    let (head, train_loss) = match spec {
        HeadSpec::Linear => {
            let mut h = LinearSoftmaxHead::init(d, num_classes, &mut init);
            let loss = sgd_train(&mut h, x, labels, cfg)?;
            (Head::Linear(h), loss)
        }
        HeadSpec::Rfgp {
            num_features,
            lengthscale,
            mean_field,
        } => {
            let mut h = RfgpHead::init(d, num_classes, *num_features, *lengthscale, *mean_field, &mut init);
            let loss = sgd_train(&mut h, x, labels, cfg)?;
            h.reset_precision();
            h.accumulate_precision(x)?;
            (Head::Rfgp(h), loss)
        }
        HeadSpec::Heteroscedastic {
            rank,
            temperature,
            train_samples,
            eval_samples,
        } => {
            let r = rank.unwrap_or_else(|| HeteroscedasticHead::default_rank(num_classes));
            let mut h = HeteroscedasticHead::init(
                d,
                num_classes,
                r,
                temperature.unwrap_or(1.0),
                *train_samples,
                *eval_samples,
                cfg.seed,
                &mut init,
            );
            let loss = sgd_train(&mut h, x, labels, cfg)?;
            (Head::Heteroscedastic(h), loss)
        }
        HeadSpec::BatchEnsemble {
            members,
            hidden,
            output,
        } => {
            let per_member = *output == super::BeOutputKind::PerMember;
            let mut h = BatchEnsembleHead::init(d, hidden, num_classes, *members, per_member, &mut init);
            let loss = sgd_train(&mut h, x, labels, cfg)?;
            (Head::BatchEnsemble(h), loss)
        }
        HeadSpec::McDropout { hidden, rate, samples } => {
            let mut h = McDropoutHead {
                base: Mlp::init(d, hidden, num_classes, &mut init),
                rate: *rate,
                samples: *samples,
                eval_seed: cfg.seed,
            };
            let loss = sgd_train(&mut h, x, labels, cfg)?;
            (Head::McDropout(h), loss)
        }
        HeadSpec::Ensemble { members, base } => {
            let mut heads = Vec::with_capacity(*members);
            let mut total = 0.0;
            let mut any = false;
            for m in 0..*members {
                let t = train_head(base, x, labels, num_classes, &cfg.for_member(m))?;
                if let Some(l) = t.train_loss {
                    total += l;
                    any = true;
                }
                heads.push(t.head);
            }
            let loss = any.then(|| total / *members as f64);
            (Head::Ensemble(EnsembleHead { members: heads }), loss)
        }
    };
    Ok(TrainedHead {
        head,
        seed: cfg.seed,
        train_loss,
    })
}

/// Trains a heteroscedastic head for each temperature in `grid` and keeps
/// the one with the lowest validation NLL (first wins ties).
#[allow(clippy::too_many_arguments)]
pub fn tune_temperature(
    spec: &HeadSpec,
    x: ArrayView2<f64>,
    labels: &[usize],
    val_x: ArrayView2<f64>,
    val_labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    grid: Option<&[f64]>,
) -> Result<(f64, TrainedHead), HeadError> {
    let HeadSpec::Heteroscedastic {
        rank,
        train_samples,
        eval_samples,
        ..
    } = spec
    else {
        return Err(HeadError::Config(format!("temperature tuning needs a heteroscedastic head, got {}", spec.kind_name())));
    };
    let mut best: Option<(f64, f64, TrainedHead)> = None;
    for &tau in grid.unwrap_or(&TEMPERATURE_GRID) {
        let candidate = HeadSpec::Heteroscedastic {
            rank: *rank,
            temperature: Some(tau),
            train_samples: *train_samples,
            eval_samples: *eval_samples,
        };
        let trained = train_head(&candidate, x, labels, num_classes, cfg)?;
        let probs: Array2<f64> = trained.head.predict_probs(val_x);
        let batch = PredictionBatch::new(probs, val_labels.to_vec())
            .map_err(|e| HeadError::Shape(e.to_string()))?;
        let score = nll(&batch);
        log::debug!("temperature {tau}: validation NLL {score}");
        if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
            best = Some((tau, score, trained));
        }
    }
    let (tau, _, head) = best.ok_or_else(|| HeadError::Config("empty temperature grid".into()))?;
    Ok((tau, head))
}
