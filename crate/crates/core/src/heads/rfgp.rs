use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{softmax_xent, xent_loss, Classifier, Differentiable, GradientSet, HeadError, ParamInfo};
use crate::linalg::{softmax_rows, Cholesky};

/// `lambda` in `logits / sqrt(1 + lambda * var)`.
pub const MEAN_FIELD_FACTOR: f64 = PI / 8.0;

/// Random-Fourier-feature GP output layer.
///
/// `phi(x) = sqrt(2 / D_rf) cos(x W + b)` with `W ~ N(0, 1) / lengthscale`
/// and `b ~ U[0, 2 pi)`, logits `phi(x) beta`. The Laplace precision
/// `I + sum_i phi_i phi_i^T` is pooled over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RfgpHead {
    /// `[D x D_rf]`, already divided by the lengthscale.
    pub rf_weights: Array2<f64>,
    /// `[D_rf]`
    pub rf_bias: Array1<f64>,
    /// `[D_rf x K]`
    pub beta: Array2<f64>,
    pub lengthscale: f64,
    pub mean_field: bool,
    precision: Option<Array2<f64>>,
    chol: Option<Cholesky>,
}

impl RfgpHead {
    pub fn init(
        input_dim: usize,
        num_classes: usize,
        num_features: usize,
        lengthscale: f64,
        mean_field: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rf_weights = Array2::from_shape_fn((input_dim, num_features), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z / lengthscale
        });
        let rf_bias = Array1::from_shape_fn(num_features, |_| rng.random_range(0.0..2.0 * PI));
        Self {
            rf_weights,
            rf_bias,
            beta: Array2::zeros((num_features, num_classes)),
            lengthscale,
            mean_field,
            precision: None,
            chol: None,
        }
    }

    /// Rebuilds a head from stored tensors.
    pub fn from_parts(
        rf_weights: Array2<f64>,
        rf_bias: Array1<f64>,
        beta: Array2<f64>,
        lengthscale: f64,
        mean_field: bool,
        precision: Option<Array2<f64>>,
    ) -> Result<Self, HeadError> {
        let d_rf = rf_weights.ncols();
        if rf_bias.len() != d_rf || beta.nrows() != d_rf {
            return Err(HeadError::Shape(format!(
                "random feature blocks disagree: W has {d_rf} columns, b has {}, beta has {} rows",
                rf_bias.len(),
                beta.nrows()
            )));
        }
        let mut head = Self {
            rf_weights,
            rf_bias,
            beta,
            lengthscale,
            mean_field,
            precision: None,
            chol: None,
        };
        if let Some(p) = precision {
            if p.dim() != (d_rf, d_rf) {
                return Err(HeadError::Shape(format!("precision must be {d_rf}x{d_rf}")));
            }
            head.chol = Some(Cholesky::factor(p.view())?);
            head.precision = Some(p);
        }
        Ok(head)
    }

    pub fn num_features(&self) -> usize {
        self.rf_bias.len()
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let scale = (2.0 / self.num_features() as f64).sqrt();
        (x.dot(&self.rf_weights) + &self.rf_bias).mapv(|v| scale * v.cos())
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.features(x).dot(&self.beta)
    }

    pub fn precision(&self) -> Option<&Array2<f64>> {
        self.precision.as_ref()
    }

    /// Resets the precision to the prior `I`.
    pub fn reset_precision(&mut self) {
        let eye = Array2::eye(self.num_features());
        self.chol = Some(Cholesky::factor(eye.view()).expect("identity is positive definite"));
        self.precision = Some(eye);
    }

    /// Adds `Phi^T Phi` for `x` to the precision. Call after training.
    pub fn accumulate_precision(&mut self, x: ArrayView2<f64>) -> Result<(), HeadError> {
        if self.precision.is_none() {
            self.reset_precision();
        }
        let phi = self.features(x);
        let p = self.precision.as_mut().expect("just set");
        *p += &phi.t().dot(&phi);
        self.chol = Some(Cholesky::factor(p.view())?);
        Ok(())
    }

    /// `phi(x)^T P^{-1} phi(x)` per row, via the Cholesky factor.
    pub fn posterior_variance(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, HeadError> {
        let chol = self.chol.as_ref().ok_or(HeadError::PrecisionMissing)?;
        let phi = self.features(x);
        Ok(phi.axis_iter(Axis(0)).map(|f| chol.inv_quad_form(f)).collect())
    }
}

impl Classifier for RfgpHead {
    fn input_dim(&self) -> usize {
        self.rf_weights.nrows()
    }

    fn num_classes(&self) -> usize {
        self.beta.ncols()
    }

    /// Mean-field adjusted when enabled and the precision exists.
    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut logits = self.logits(x);
        if self.mean_field {
            if let Ok(var) = self.posterior_variance(x) {
                for (mut row, v) in logits.axis_iter_mut(Axis(0)).zip(var) {
                    let s = (1.0 + MEAN_FIELD_FACTOR * v).sqrt();
                    row.mapv_inplace(|z| z / s);
                }
            }
        }
        softmax_rows(logits.view())
    }
}

impl Differentiable for RfgpHead {
    type Noise = ();

    fn draw_noise(&self, _rows: usize, _rng: &mut ChaCha8Rng) {}

    fn param_info(&self) -> Vec<ParamInfo> {
        vec![ParamInfo::new("beta", true)]
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.beta.as_slice().expect("standard layout")]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.beta.as_slice_mut().expect("standard layout")]
    }

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> f64 {
        xent_loss(self.logits(x).view(), labels)
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> (f64, GradientSet) {
        let phi = self.features(x);
        let (loss, g) = softmax_xent(phi.dot(&self.beta).view(), labels);
        (
            loss,
            GradientSet {
                blocks: vec![("beta".into(), phi.t().dot(&g).into_iter().collect())],
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn head() -> RfgpHead {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = RfgpHead::init(2, 3, 32, 1.5, true, &mut rng);
        h.beta.mapv_inplace(|_| 0.0);
        h.beta[[0, 1]] = 2.0;
        h.beta[[5, 2]] = -1.0;
        h
    }

    #[test]
    fn variance_needs_precision() {
        let h = head();
        assert!(matches!(
            h.posterior_variance(array![[0.0, 0.0]].view()),
            Err(HeadError::PrecisionMissing)
        ));
    }

    #[test]
    fn prior_variance_is_feature_norm() {
        let mut h = head();
        h.reset_precision();
        let x = array![[0.4, -1.1]];
        let phi = h.features(x.view());
        let norm2: f64 = phi.iter().map(|v| v * v).sum();
        let var = h.posterior_variance(x.view()).unwrap();
        assert!((var[0] - norm2).abs() < 1e-12);
    }

    #[test]
    fn feature_scale() {
        let h = head();
        let phi = h.features(array![[0.0, 0.0]].view());
        let bound = (2.0 / 32.0f64).sqrt();
        assert!(phi.iter().all(|v| v.abs() <= bound + 1e-15));
    }

    #[test]
    fn mean_field_shrinks_toward_uniform() {
        let mut h = head();
        h.reset_precision();
        let x = array![[0.4, -1.1]];
        let adjusted = h.predict_probs(x.view());
        let plain = softmax_rows(h.logits(x.view()).view());
        let spread = |p: &Array2<f64>| p.iter().fold(0.0f64, |a, &b| a.max(b)) - p.iter().fold(1.0f64, |a, &b| a.min(b));
        assert!(spread(&adjusted) < spread(&plain));
    }

    #[test]
    fn data_shrinks_variance() {
        let mut h = head();
        h.reset_precision();
        let x = array![[0.4, -1.1]];
        let before = h.posterior_variance(x.view()).unwrap()[0];
        h.accumulate_precision(Array2::from_elem((20, 2), 0.5).view()).unwrap();
        h.accumulate_precision(x.view()).unwrap();
        assert!(h.posterior_variance(x.view()).unwrap()[0] < before);
    }
}
