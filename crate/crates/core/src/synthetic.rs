//! Seeded synthetic datasets used by tests, the acceptance suite and the
//! example fixtures.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor_store::{DatasetManifest, Labels, Logits, Split, SplitRole};

/// Embeddings with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl Labeled {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `per_class` isotropic draws around each row of `means`, interleaved by
/// class (row `i` has label `i % K`).
pub fn gaussian_blobs(means: &Array2<f64>, sigma: f64, per_class: usize, rng: &mut ChaCha8Rng) -> Labeled {
    let (k, d) = means.dim();
    let mut x = Array2::zeros((k * per_class, d));
    let mut y = Vec::with_capacity(k * per_class);
    for i in 0..k * per_class {
        let c = i % k;
        for j in 0..d {
            x[[i, j]] = means[[c, j]] + sigma * normal(rng);
        }
        y.push(c);
    }
    Labeled { x, y }
}

/// Isotropic draws around `center`.
pub fn gaussian_cloud(center: &Array1<f64>, sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, center.len()), |(_, j)| center[j] + sigma * normal(rng))
}

/// Two classes separated along one discriminative coordinate, plus shared
/// high-variance nuisance coordinates. The out-of-distribution cluster sits
/// between the classes on the discriminative coordinate and matches them
/// on every nuisance coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceOsr {
    pub train: Labeled,
    pub test: Labeled,
    pub ood: Array2<f64>,
}

pub const NUISANCE_DIMS: usize = 8;
pub const NUISANCE_SIGMA: f64 = 10.0;
pub const DISCRIMINATIVE_SIGMA: f64 = 0.5;

pub fn nuisance_osr(seed: u64) -> NuisanceOsr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 1 + NUISANCE_DIMS;
    let draw = |rng: &mut ChaCha8Rng, n: usize, center: Option<f64>| -> Labeled {
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let mu = center.unwrap_or(if c == 0 { -1.0 } else { 1.0 });
            x[[i, 0]] = mu + DISCRIMINATIVE_SIGMA * normal(rng);
            for j in 1..d {
                x[[i, j]] = NUISANCE_SIGMA * normal(rng);
            }
            y.push(c);
        }
        Labeled { x, y }
    };
    let train = draw(&mut rng, 2000, None);
    let test = draw(&mut rng, 500, None);
    let ood = draw(&mut rng, 500, Some(0.0)).x;
    NuisanceOsr { train, test, ood }
}

/// Two blobs for GP distance awareness, plus probes far from both.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBlobGp {
    pub train: Labeled,
    pub test: Labeled,
    pub far: Array2<f64>,
    pub sigma: f64,
    pub centers: Array2<f64>,
}

pub fn two_blob_gp(seed: u64) -> TwoBlobGp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 1.0;
    let centers = ndarray::array![[-3.0, 0.0], [3.0, 0.0]];
    let train = gaussian_blobs(&centers, sigma, 200, &mut rng);
    let test = gaussian_blobs(&centers, sigma, 100, &mut rng);
    // Probes on a ring of radius 12 around the origin: at least
    // 12 - 3 = 9 sigma from either center.
    let far = Array2::from_shape_fn((200, 2), |(i, j)| {
        let t = 2.0 * std::f64::consts::PI * i as f64 / 200.0;
        12.0 * if j == 0 { t.cos() } else { t.sin() }
    });
    TwoBlobGp {
        train,
        test,
        far,
        sigma,
        centers,
    }
}

/// Active-learning pool in which most examples are copies of a few easy
/// prototypes per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicatedEasy {
    pub pool: Labeled,
    pub test: Labeled,
    /// `is_duplicate[i]` marks pool rows that copy a prototype.
    pub is_duplicate: Vec<bool>,
}

/// Settings for [`duplicated_easy`].
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicatedEasyConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Class means are `separation * e_k`.
    pub separation: f64,
    pub sigma: f64,
    pub pool_size: usize,
    pub duplicate_fraction: f64,
    pub prototypes_per_class: usize,
    /// Distance from a prototype to its class mean, toward the next class.
    pub prototype_offset: f64,
    pub test_size: usize,
}

impl Default for DuplicatedEasyConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 10,
            separation: 4.0,
            sigma: 1.0,
            pool_size: 2000,
            duplicate_fraction: 0.9,
            prototypes_per_class: 2,
            prototype_offset: 2.0,
            test_size: 2000,
        }
    }
}

/// Real examples are `N(separation * e_k, sigma^2 I)`. A `duplicate_fraction`
/// share of the pool instead repeats a handful of prototypes per class that
/// lie near, but not at, the class means, displaced toward a neighbor. Prototypes are easy to classify
/// and say little about the true boundaries. Pool rows are shuffled.
pub fn duplicated_easy(cfg: &DuplicatedEasyConfig, seed: u64) -> DuplicatedEasy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (cfg.num_classes, cfg.dim);
    let mut means = Array2::zeros((k, d));
    for c in 0..k {
        means[[c, c % d]] = cfg.separation;
    }
    // Prototypes lean toward the next class, so boundaries fitted to them
    // alone are biased.
    let mut prototypes = Vec::new();
    for c in 0..k {
        let toward = &means.row((c + 1) % k) - &means.row(c);
        let toward = &toward / toward.dot(&toward).sqrt();
        for _ in 0..cfg.prototypes_per_class {
            let jitter = Array1::from_shape_fn(d, |_| 0.1 * normal(&mut rng));
            let p = &means.row(c) + &(&toward * cfg.prototype_offset) + &jitter;
            prototypes.push((p, c));
        }
    }
    let n_dup = (cfg.duplicate_fraction * cfg.pool_size as f64).round() as usize;
    let n_real = cfg.pool_size - n_dup;
    let real_per_class = n_real.div_ceil(k);
    let real = gaussian_blobs(&means, cfg.sigma, real_per_class, &mut rng).select(&(0..n_real).collect::<Vec<_>>());
    let mut rows: Vec<(Array1<f64>, usize, bool)> = Vec::with_capacity(cfg.pool_size);
    for (x, &y) in real.x.axis_iter(Axis(0)).zip(&real.y) {
        rows.push((x.to_owned(), y, false));
    }
    for i in 0..n_dup {
        let (p, c) = &prototypes[i % prototypes.len()];
        rows.push((p.clone(), *c, true));
    }
    rows.shuffle(&mut rng);
    let mut x = Array2::zeros((rows.len(), d));
    let mut y = Vec::with_capacity(rows.len());
    let mut is_duplicate = Vec::with_capacity(rows.len());
    for (i, (row, c, dup)) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&row);
        y.push(c);
        is_duplicate.push(dup);
    }
    let test = gaussian_blobs(&means, cfg.sigma, cfg.test_size.div_ceil(k), &mut rng)
        .select(&(0..cfg.test_size).collect::<Vec<_>>());
    DuplicatedEasy {
        pool: Labeled { x, y },
        test,
        is_duplicate,
    }
}

fn flat_split(role: SplitRole, data: &Labeled, logits: Array2<f64>) -> Split {
    Split {
        role,
        embeddings: Some(data.x.clone()),
        logits: Some(Logits::Flat(logits)),
        labels: Labels::Flat(data.y.clone()),
        soft_labels: None,
        groups: None,
    }
}

/// A small three-class dataset exercising every split role: embeddings
/// and logits everywhere, soft labels on the label-uncertainty split and
/// groups on the subpopulation split.
pub fn golden_manifest(seed: u64) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3;
    let d = 4;
    let means = ndarray::array![
        [2.0, 0.0, 0.0, 0.5],
        [0.0, 2.0, 0.0, -0.5],
        [0.0, 0.0, 2.0, 0.0]
    ];
    // Frozen "pretrained" classifier producing the stored logits.
    let w = Array2::from_shape_fn((d, k), |(i, j)| if i == j { 1.5 } else { 0.1 * normal(&mut rng) });
    let logits_of = |x: &Array2<f64>, rng: &mut ChaCha8Rng| -> Array2<f64> {
        let mut z = x.dot(&w);
        z.mapv_inplace(|v| v + 0.3 * normal(rng));
        z
    };
    let mut splits = BTreeMap::new();
    let train = gaussian_blobs(&means, 0.9, 40, &mut rng);
    let l = logits_of(&train.x, &mut rng);
    splits.insert("train".into(), flat_split(SplitRole::Train, &train, l));
    let val = gaussian_blobs(&means, 0.9, 15, &mut rng);
    let l = logits_of(&val.x, &mut rng);
    splits.insert("validation".into(), flat_split(SplitRole::Validation, &val, l));
    let test = gaussian_blobs(&means, 0.9, 20, &mut rng);
    let l = logits_of(&test.x, &mut rng);
    splits.insert("test".into(), flat_split(SplitRole::Test, &test, l));
    let shifted = gaussian_blobs(&means, 1.4, 15, &mut rng);
    let l = logits_of(&shifted.x, &mut rng);
    splits.insert("test_noisy".into(), flat_split(SplitRole::CovariateShift, &shifted, l));

    let ood_x = gaussian_cloud(&ndarray::array![-1.5, -1.5, -1.5, 0.0], 0.8, 30, &mut rng);
    let ood = Labeled {
        y: vec![0; ood_x.nrows()],
        x: ood_x,
    };
    let l = logits_of(&ood.x, &mut rng);
    splits.insert("ood".into(), flat_split(SplitRole::SemanticShift, &ood, l));

    let amb = gaussian_blobs(&means, 1.2, 12, &mut rng);
    let l = logits_of(&amb.x, &mut rng);
    let mut soft = Array2::zeros((amb.len(), k));
    for (i, &y) in amb.y.iter().enumerate() {
        let other = (y + 1 + rng.random_range(0..k - 1)) % k;
        let p = 0.5 + 0.4 * rng.random::<f64>();
        soft[[i, y]] = p;
        soft[[i, other]] = 1.0 - p;
    }
    let mut split = flat_split(SplitRole::LabelUncertainty, &amb, l);
    split.soft_labels = Some(soft);
    splits.insert("ambiguous".into(), split);

    let sub = gaussian_blobs(&means, 1.0, 20, &mut rng);
    let l = logits_of(&sub.x, &mut rng);
    let mut split = flat_split(SplitRole::Subpopulation, &sub, l);
    split.groups = Some((0..sub.len()).map(|i| (i % 6) as u32).collect());
    splits.insert("groups".into(), split);

    DatasetManifest {
        name: "golden".into(),
        classes: vec!["alpha".into(), "beta".into(), "gamma".into()],
        ood_classes: Vec::new(),
        splits,
    }
}
