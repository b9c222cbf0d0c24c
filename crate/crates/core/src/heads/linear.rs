use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{softmax_xent, xent_loss, Classifier, Differentiable, GradientSet, ParamInfo};
use crate::linalg::softmax_rows;

/// `softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxHead {
    /// `[D x K]`
    pub weights: Array2<f64>,
    /// `[K]`
    pub bias: Array1<f64>,
}

impl LinearSoftmaxHead {
    pub fn zeros(input_dim: usize, num_classes: usize) -> Self {
        Self {
            weights: Array2::zeros((input_dim, num_classes)),
            bias: Array1::zeros(num_classes),
        }
    }

    /// Weights drawn from `N(0, 0.01^2)`, zero bias.
    pub fn init(input_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 0.01).expect("valid normal");
        Self {
            weights: Array2::from_shape_fn((input_dim, num_classes), |_| dist.sample(rng)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

impl Classifier for LinearSoftmaxHead {
    fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        softmax_rows(self.logits(x).view())
    }
}

impl Differentiable for LinearSoftmaxHead {
    type Noise = ();

    fn draw_noise(&self, _rows: usize, _rng: &mut ChaCha8Rng) {}

    fn param_info(&self) -> Vec<ParamInfo> {
        vec![ParamInfo::new("weights", true), ParamInfo::new("bias", false)]
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> f64 {
        xent_loss(self.logits(x).view(), labels)
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> (f64, GradientSet) {
        let (loss, g) = softmax_xent(self.logits(x).view(), labels);
        let dw = x.t().dot(&g);
        let db = g.sum_axis(Axis(0));
        (
            loss,
            GradientSet {
                blocks: vec![
                    ("weights".into(), dw.into_iter().collect()),
                    ("bias".into(), db.to_vec()),
                ],
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_head_is_uniform() {
        let h = LinearSoftmaxHead::zeros(3, 4);
        let p = h.predict_probs(array![[1.0, -2.0, 0.5]].view());
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradient_sign_pushes_toward_label() {
        let h = LinearSoftmaxHead::zeros(1, 2);
        let (_, g) = h.loss_and_grad(array![[1.0]].view(), &[1], &());
        let db = g.get("bias").unwrap();
        assert!(db[1] < 0.0 && db[0] > 0.0);
    }
}
