//! Batch active learning over an embedding pool: margin or uniform
//! acquisition, per-round retraining, and label-efficiency curves.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heads::{lbfgs_logreg, train_head, Classifier, HeadError, HeadSpec, LbfgsOptions, TrainConfig};
use crate::metrics::{accuracy, CurvePoint, MetricError, PredictionBatch};

#[derive(Debug, thiserror::Error)]
pub enum AlError {
    #[error("invalid active-learning setup: {0}")]
    Config(String),
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("batch of {requested} exceeds the {available} unlabeled examples")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("training failed in round {round}: {source}")]
    Training {
        round: usize,
        #[source]
        source: HeadError,
        /// Rounds completed before the failure.
        partial: Box<PoolState>,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// `p_(1) - p_(2)` per row; smaller means more informative.
pub fn margin_scores(probs: ArrayView2<f64>) -> Result<Vec<f64>, AlError> {
    if probs.ncols() < 2 {
        return Err(AlError::Config(format!("margins need K >= 2, got {}", probs.ncols())));
    }
    Ok(probs
        .axis_iter(Axis(0))
        .map(|row| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            first - second
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Margin,
    Uniform,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Margin => "margin",
            Strategy::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "margin" => Ok(Strategy::Margin),
            "uniform" => Ok(Strategy::Uniform),
            other => Err(format!("unknown strategy {other:?} (expected margin or uniform)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub acquired: Vec<usize>,
    pub num_labels: usize,
    pub accuracy: f64,
}

/// Labeled and unlabeled index sets plus the per-round history.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    labeled: Vec<usize>,
    unlabeled: BTreeSet<usize>,
    pub history: Vec<RoundRecord>,
}

impl PoolState {
    /// All of `0..pool_size` unlabeled.
    pub fn new(pool_size: usize) -> Self {
        Self {
            labeled: Vec::new(),
            unlabeled: (0..pool_size).collect(),
            history: Vec::new(),
        }
    }

    /// Labeled indices in acquisition order.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    /// Unlabeled indices, ascending.
    pub fn unlabeled(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Moves `idx` from unlabeled to labeled. All-or-nothing.
    pub fn label(&mut self, idx: &[usize]) -> Result<(), AlError> {
        let unique: BTreeSet<usize> = idx.iter().copied().collect();
        if unique.len() != idx.len() || !unique.is_subset(&self.unlabeled) {
            return Err(AlError::Config("acquired indices must be distinct and unlabeled".into()));
        }
        for &i in idx {
            self.unlabeled.remove(&i);
        }
        self.labeled.extend_from_slice(idx);
        Ok(())
    }
}

/// Picks `batch_size` unlabeled indices and labels them.
///
/// `scores` align with [`PoolState::unlabeled`]. Margin takes the smallest
/// scores with ties to the lowest index; uniform samples without
/// replacement from a stream seeded by `seed` and ignores `scores`.
pub fn acquire_batch(
    pool: &mut PoolState,
    scores: &[f64],
    batch_size: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<usize>, AlError> {
    let candidates = pool.unlabeled();
    if candidates.is_empty() {
        return Err(AlError::EmptyPool);
    }
    if batch_size > candidates.len() {
        return Err(AlError::BatchTooLarge {
            requested: batch_size,
            available: candidates.len(),
        });
    }
    let chosen: Vec<usize> = match strategy {
        Strategy::Margin => {
            if scores.len() != candidates.len() {
                return Err(AlError::Config(format!(
                    "{} scores for {} unlabeled examples",
                    scores.len(),
                    candidates.len()
                )));
            }
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            order[..batch_size].iter().map(|&j| candidates[j]).collect()
        }
        Strategy::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, candidates.len(), batch_size)
                .into_iter()
                .map(|j| candidates[j])
                .collect()
        }
    };
    pool.label(&chosen)?;
    Ok(chosen)
}

/// The model retrained from scratch each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    Head {
        spec: HeadSpec,
        #[serde(default)]
        train: TrainConfig,
    },
    Lbfgs {
        #[serde(default)]
        options: LbfgsOptions,
    },
}

impl Default for Learner {
    fn default() -> Self {
        Learner::Head {
            spec: HeadSpec::Linear,
            train: TrainConfig::default(),
        }
    }
}

impl Learner {
    /// Trains on `(x, y)` with `seed` and returns a probability function.
    pub fn fit(
        &self,
        x: ArrayView2<f64>,
        y: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Box<dyn Classifier>, HeadError> {
        match self {
            Learner::Head { spec, train } => {
                let cfg = TrainConfig {
                    seed,
                    ..train.clone()
                };
                Ok(Box::new(train_head(spec, x, y, num_classes, &cfg)?.head))
            }
            Learner::Lbfgs { options } => Ok(Box::new(lbfgs_logreg(x, y, num_classes, options)?.head)),
        }
    }
}

fn default_init() -> f64 {
    2.0
}
fn default_max() -> f64 {
    20.0
}
fn default_batch() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlConfig {
    #[serde(default = "default_init")]
    pub init_per_class_factor: f64,
    #[serde(default = "default_max")]
    pub max_per_class_factor: f64,
    #[serde(default = "default_batch")]
    pub batch_per_class_factor: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub learner: Learner,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            init_per_class_factor: default_init(),
            max_per_class_factor: default_max(),
            batch_per_class_factor: default_batch(),
            strategy: Strategy::default(),
            seed: 0,
            learner: Learner::default(),
        }
    }
}

/// Initial, maximum and per-round label counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlSizes {
    pub init: usize,
    pub max: usize,
    pub batch: usize,
}

impl AlConfig {
    /// `round(factor * K)`, at least 1.
    pub fn sizes(&self, num_classes: usize) -> Result<AlSizes, AlError> {
        let f = [self.init_per_class_factor, self.max_per_class_factor, self.batch_per_class_factor];
        if f.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(AlError::Config(format!("factors must be positive, got {f:?}")));
        }
        let size = |v: f64| ((v * num_classes as f64).round() as usize).max(1);
        let s = AlSizes {
            init: size(f[0]),
            max: size(f[1]),
            batch: size(f[2]),
        };
        if s.max < s.init {
            return Err(AlError::Config(format!("max size {} is below the initial size {}", s.max, s.init)));
        }
        Ok(s)
    }

    fn round_seed(&self, round: usize) -> u64 {
        self.seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// `(num_labels, accuracy)` after every round, plus the final pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AlCurve {
    pub points: Vec<CurvePoint>,
    pub pool: PoolState,
}

impl AlCurve {
    /// Fewest labels at which accuracy reaches `target`.
    pub fn labels_to_reach(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|p| p.y >= target).map(|p| p.x as usize)
    }
}

/// Class-stratified uniform draw: `n / K` per class, remainder uniform.
fn stratified_init(labels: &[usize], num_classes: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, AlError> {
    let per_class = n / num_classes;
    let mut chosen = Vec::with_capacity(n);
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < per_class.max(1) {
            return Err(AlError::Config(format!("class {c} has {} pool examples, need {}", idx.len(), per_class.max(1))));
        }
        chosen.extend(sample(rng, idx.len(), per_class).into_iter().map(|j| idx[j]));
    }
    let taken: BTreeSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..labels.len()).filter(|i| !taken.contains(i)).collect();
    let extra = n - chosen.len();
    chosen.extend(sample(rng, rest.len(), extra).into_iter().map(|j| rest[j]));
    chosen.sort_unstable();
    Ok(chosen)
}

fn evaluate(model: &dyn Classifier, x: ArrayView2<f64>, y: &[usize]) -> Result<f64, AlError> {
    let batch = PredictionBatch::new(model.predict_probs(x), y.to_vec())?;
    Ok(accuracy(&batch))
}

/// Runs active learning on a pool and reports test accuracy after each
/// round. Round 0 trains on the stratified initial set.
pub fn al_loop(
    pool_x: ArrayView2<f64>,
    pool_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &AlConfig,
) -> Result<AlCurve, AlError> {
    let sizes = cfg.sizes(num_classes)?;
    if pool_x.nrows() != pool_y.len() || test_x.nrows() != test_y.len() {
        return Err(AlError::Config("row counts of embeddings and labels differ".into()));
    }
    if pool_y.len() < sizes.max {
        return Err(AlError::Config(format!("pool has {} examples, max size is {}", pool_y.len(), sizes.max)));
    }
    let mut pool = PoolState::new(pool_y.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = stratified_init(pool_y, num_classes, sizes.init, &mut rng)?;
    pool.label(&init)?;
    let mut acquired = init;
    let mut points = Vec::new();
    let mut round = 0;
    loop {
        let labeled = pool.labeled().to_vec();
        let xl = pool_x.select(Axis(0), &labeled);
        let yl: Vec<usize> = labeled.iter().map(|&i| pool_y[i]).collect();
        let model = match cfg.learner.fit(xl.view(), &yl, num_classes, cfg.round_seed(round)) {
            Ok(m) => m,
            Err(source) => {
                return Err(AlError::Training {
                    round,
                    source,
                    partial: Box::new(pool),
                })
            }
        };
        let acc = evaluate(model.as_ref(), test_x, test_y)?;
        pool.history.push(RoundRecord {
            round,
            acquired: std::mem::take(&mut acquired),
            num_labels: labeled.len(),
            accuracy: acc,
        });
        points.push(CurvePoint {
            x: labeled.len() as f64,
            y: acc,
        });
        if labeled.len() >= sizes.max || pool.num_unlabeled() == 0 {
            break;
        }
        let batch = sizes.batch.min(sizes.max - labeled.len()).min(pool.num_unlabeled());
        let scores = match cfg.strategy {
            Strategy::Margin => {
                let cand = pool.unlabeled();
                let probs: Array2<f64> = model.predict_probs(pool_x.select(Axis(0), &cand).view());
                margin_scores(probs.view())?
            }
            Strategy::Uniform => Vec::new(),
        };
        round += 1;
        acquired = acquire_batch(&mut pool, &scores, batch, cfg.strategy, cfg.round_seed(round))?;
    }
    Ok(AlCurve { points, pool })
}

/// Retrains on a fixed acquisition schedule and reports the same curve
/// [`al_loop`] would for those acquisitions.
#[allow(clippy::too_many_arguments)]
pub fn al_replay(
    pool_x: ArrayView2<f64>,
    pool_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
    num_classes: usize,
    learner: &Learner,
    seed: u64,
    schedule: &[Vec<usize>],
) -> Result<Vec<CurvePoint>, AlError> {
    let cfg = AlConfig {
        seed,
        learner: learner.clone(),
        ..Default::default()
    };
    let mut pool = PoolState::new(pool_y.len());
    let mut points = Vec::with_capacity(schedule.len());
    for (round, batch) in schedule.iter().enumerate() {
        pool.label(batch)?;
        let labeled = pool.labeled().to_vec();
        let xl = pool_x.select(Axis(0), &labeled);
        let yl: Vec<usize> = labeled.iter().map(|&i| pool_y[i]).collect();
        let model = learner
            .fit(xl.view(), &yl, num_classes, cfg.round_seed(round))
            .map_err(|source| AlError::Training {
                round,
                source,
                partial: Box::new(pool.clone()),
            })?;
        points.push(CurvePoint {
            x: labeled.len() as f64,
            y: evaluate(model.as_ref(), test_x, test_y)?,
        });
    }
    Ok(points)
}
