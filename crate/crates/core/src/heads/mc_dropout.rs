use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::Mlp;
use super::{softmax_xent, Classifier, Differentiable, GradientSet, ParamInfo};
use crate::linalg::{softmax_rows, RunningMean};

pub(crate) const EVAL_STREAM: u64 = 3;

/// MLP with inverted dropout on every layer input, kept on at test time.
///
/// Each Monte-Carlo pass samples one sub-network and applies it to the
/// whole batch, so a row's prediction does not depend on its batch.
#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutHead {
    pub base: Mlp,
    pub rate: f64,
    pub samples: usize,
    pub eval_seed: u64,
}

impl McDropoutHead {
    fn mask(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        Array2::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < self.rate {
                0.0
            } else {
                keep
            }
        })
    }

    fn masks(&self, rows: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
        self.base
            .layer_inputs()
            .into_iter()
            .map(|c| self.mask(rows, c, rng))
            .collect()
    }
}

impl Classifier for McDropoutHead {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
        rng.set_stream(EVAL_STREAM);
        let mut mean = RunningMean::new();
        for _ in 0..self.samples {
            let masks = self.masks(1, &mut rng);
            let logits = self.base.trace(x, Some(&masks)).logits;
            mean.push(softmax_rows(logits.view()));
        }
        mean.finish().expect("at least one sample")
    }
}

impl Differentiable for McDropoutHead {
    /// One mask per layer, `[rows x layer inputs]`.
    type Noise = Vec<Array2<f64>>;

    fn draw_noise(&self, rows: usize, rng: &mut ChaCha8Rng) -> Self::Noise {
        self.masks(rows, rng)
    }

    fn param_info(&self) -> Vec<ParamInfo> {
        self.base.info()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.base.slices()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.base.slices_mut()
    }

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], noise: &Self::Noise) -> f64 {
        super::xent_loss(self.base.trace(x, Some(noise)).logits.view(), labels)
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], noise: &Self::Noise) -> (f64, GradientSet) {
        let trace = self.base.trace(x, Some(noise));
        let (loss, g) = softmax_xent(trace.logits.view(), labels);
        (loss, self.base.backward(&trace, g, Some(noise)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn head(rate: f64, samples: usize) -> McDropoutHead {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        McDropoutHead {
            base: Mlp::init(3, &[6], 4, &mut rng),
            rate,
            samples,
            eval_seed: 11,
        }
    }

    #[test]
    fn zero_rate_matches_base_exactly() {
        let h = head(0.0, 7);
        let x = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.4]];
        assert_eq!(h.predict_probs(x.view()), h.base.predict_probs(x.view()));
    }

    #[test]
    fn prediction_is_batch_independent() {
        let h = head(0.3, 16);
        let x = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.4]];
        let both = h.predict_probs(x.view());
        let second = h.predict_probs(x.slice(ndarray::s![1..2, ..]));
        assert_eq!(both.row(1), second.row(0));
    }

    #[test]
    fn masks_are_inverted_dropout() {
        let h = head(0.25, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = h.mask(200, 50, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.05);
    }
}
