//! Class-conditional Gaussians with a shared covariance, plus a
//! label-agnostic background Gaussian for the relative score.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::OodError;
use crate::linalg::Cholesky;

/// Ridge added to both covariance diagonals before factoring.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-6 * trace(Sigma) / D`, floored at 1e-12.
    #[default]
    Auto,
    Fixed(f64),
}

const AUTO_RIDGE_SCALE: f64 = 1e-6;
const AUTO_RIDGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassModel {
    /// `[K x D]` class means.
    pub means: Array2<f64>,
    /// `[D x D]` shared within-class covariance (unregularized).
    pub shared_cov: Array2<f64>,
    pub bg_mean: Array1<f64>,
    pub bg_cov: Array2<f64>,
    pub reg: f64,
    pub counts: Vec<usize>,
    chol: Cholesky,
    bg_chol: Cholesky,
}

/// Fits per-class means, the pooled covariance
/// `(1/N) sum_k sum_{i: y_i = k} (z_i - mu_k)(z_i - mu_k)^T`,
/// and the background mean / covariance over all rows.
pub fn fit_class_gaussians(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    ridge: Ridge,
) -> Result<GaussianClassModel, OodError> {
    let (n, d) = embeddings.dim();
    if labels.len() != n {
        return Err(OodError::Invalid(format!("{n} embeddings but {} labels", labels.len())));
    }
    if n == 0 || num_classes == 0 {
        return Err(OodError::Invalid("empty training set".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(OodError::Invalid(format!("label {l} outside [0, {num_classes})")));
    }

    let mut counts = vec![0usize; num_classes];
    let mut sums = Array2::<f64>::zeros((num_classes, d));
    for (z, &y) in embeddings.axis_iter(Axis(0)).zip(labels) {
        counts[y] += 1;
        sums.row_mut(y).scaled_add(1.0, &z);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(OodError::EmptyClass(k));
    }
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        log::warn!("class {k} has a single example; its covariance contribution is zero");
    }
    if n <= d {
        log::warn!("fitting {d}-dimensional Gaussians on only {n} examples");
    }
    let mut means = sums;
    for (mut row, &c) in means.axis_iter_mut(Axis(0)).zip(&counts) {
        row.mapv_inplace(|v| v / c as f64);
    }

    let mut bg_sum = Array1::<f64>::zeros(d);
    for z in embeddings.axis_iter(Axis(0)) {
        bg_sum.scaled_add(1.0, &z);
    }
    let bg_mean = bg_sum / n as f64;

    let mut shared_cov = Array2::<f64>::zeros((d, d));
    let mut bg_cov = Array2::<f64>::zeros((d, d));
    for (z, &y) in embeddings.axis_iter(Axis(0)).zip(labels) {
        accumulate_outer(&mut shared_cov, &(&z - &means.row(y)));
        accumulate_outer(&mut bg_cov, &(&z - &bg_mean));
    }
    shared_cov.mapv_inplace(|v| v / n as f64);
    bg_cov.mapv_inplace(|v| v / n as f64);

    let reg = match ridge {
        Ridge::Fixed(r) => {
            if !(r >= 0.0) {
                return Err(OodError::Invalid(format!("ridge {r} must be non-negative")));
            }
            r
        }
        Ridge::Auto => (AUTO_RIDGE_SCALE * shared_cov.diag().sum() / d as f64).max(AUTO_RIDGE_FLOOR),
    };
    let chol = Cholesky::factor(add_ridge(&shared_cov, reg).view())?;
    let bg_chol = Cholesky::factor(add_ridge(&bg_cov, reg).view())?;

    Ok(GaussianClassModel {
        means,
        shared_cov,
        bg_mean,
        bg_cov,
        reg,
        counts,
        chol,
        bg_chol,
    })
}

fn accumulate_outer(acc: &mut Array2<f64>, v: &Array1<f64>) {
    let d = v.len();
    for i in 0..d {
        for j in 0..d {
            acc[[i, j]] += v[i] * v[j];
        }
    }
}

fn add_ridge(cov: &Array2<f64>, reg: f64) -> Array2<f64> {
    let mut out = cov.clone();
    out.diag_mut().mapv_inplace(|v| v + reg);
    out
}

impl GaussianClassModel {
    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Lower Cholesky factor of `Sigma + reg I`.
    pub fn factor(&self) -> &Cholesky {
        &self.chol
    }

    /// Lower Cholesky factor of `Sigma_0 + reg I`.
    pub fn background_factor(&self) -> &Cholesky {
        &self.bg_chol
    }

    fn check_dim(&self, z: ArrayView1<f64>) -> Result<(), OodError> {
        if z.len() != self.dim() {
            return Err(OodError::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance to each class mean.
    pub fn class_distances(&self, z: ArrayView1<f64>) -> Result<Vec<f64>, OodError> {
        self.check_dim(z)?;
        Ok(self
            .means
            .axis_iter(Axis(0))
            .map(|mu| self.chol.inv_quad_form((&z - &mu).view()))
            .collect())
    }

    /// `min_k (z - mu_k)^T Sigma^{-1} (z - mu_k)`, in squared form.
    pub fn mahalanobis_score(&self, z: ArrayView1<f64>) -> Result<f64, OodError> {
        Ok(self
            .class_distances(z)?
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }

    /// Squared distance to the background Gaussian.
    pub fn background_distance(&self, z: ArrayView1<f64>) -> Result<f64, OodError> {
        self.check_dim(z)?;
        Ok(self.bg_chol.inv_quad_form((&z - &self.bg_mean).view()))
    }

    /// `MD(z) - MD_0(z)`.
    pub fn relative_mahalanobis_score(&self, z: ArrayView1<f64>) -> Result<f64, OodError> {
        Ok(self.mahalanobis_score(z)? - self.background_distance(z)?)
    }

    pub fn mahalanobis_scores(&self, zs: ArrayView2<f64>) -> Result<Vec<f64>, OodError> {
        zs.axis_iter(Axis(0)).map(|z| self.mahalanobis_score(z)).collect()
    }

    pub fn relative_mahalanobis_scores(&self, zs: ArrayView2<f64>) -> Result<Vec<f64>, OodError> {
        zs.axis_iter(Axis(0))
            .map(|z| self.relative_mahalanobis_score(z))
            .collect()
    }
}
