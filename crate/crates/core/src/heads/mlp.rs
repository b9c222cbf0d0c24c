use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{softmax_xent, xent_loss, Classifier, Differentiable, GradientSet, ParamInfo};
use crate::linalg::softmax_rows;

/// Fully connected layer `a W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in x out]`
    pub w: Array2<f64>,
    /// `[out]`
    pub b: Array1<f64>,
}

impl Dense {
    /// LeCun-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid normal");
        Self {
            w: Array2::from_shape_fn((inputs, outputs), |_| dist.sample(rng)),
            b: Array1::zeros(outputs),
        }
    }
}

/// tanh MLP. The last layer emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub(crate) struct MlpTrace {
    /// Masked input of each layer.
    pub inputs: Vec<Array2<f64>>,
    /// tanh outputs feeding each layer after the first.
    pub hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl Mlp {
    pub fn init(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(num_classes);
        Self {
            layers: widths
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn layer_inputs(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.w.nrows()).collect()
    }

    /// Forward pass. Each mask multiplies its layer's input and may have
    /// one row (shared across the batch) or one row per example.
    pub(crate) fn trace(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = match masks {
                Some(m) => &h * &m[l],
                None => h.clone(),
            };
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            if l == last {
                return MlpTrace {
                    inputs,
                    hidden,
                    logits: z,
                };
            }
            h = z.mapv(f64::tanh);
            hidden.push(h.clone());
        }
        unreachable!("an MLP has at least one layer")
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.trace(x, None).logits
    }

    pub(crate) fn backward(
        &self,
        trace: &MlpTrace,
        dlogits: Array2<f64>,
        masks: Option<&[Array2<f64>]>,
    ) -> GradientSet {
        let mut blocks = Vec::with_capacity(2 * self.layers.len());
        let mut dz = dlogits;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            blocks.push((format!("layer{l}.b"), dz.sum_axis(Axis(0)).to_vec()));
            blocks.push((format!("layer{l}.w"), trace.inputs[l].t().dot(&dz).into_iter().collect()));
            if l == 0 {
                break;
            }
            let mut dh = dz.dot(&layer.w.t());
            if let Some(m) = masks {
                dh = &dh * &m[l];
            }
            let h = &trace.hidden[l - 1];
            dz = dh * h.mapv(|v| 1.0 - v * v);
        }
        blocks.reverse();
        GradientSet { blocks }
    }

    pub(crate) fn info(&self) -> Vec<ParamInfo> {
        (0..self.layers.len())
            .flat_map(|l| [ParamInfo::new(format!("layer{l}.w"), true), ParamInfo::new(format!("layer{l}.b"), false)])
            .collect()
    }

    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl Classifier for Mlp {
    fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].w.ncols()
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        softmax_rows(self.logits(x).view())
    }
}

impl Differentiable for Mlp {
    type Noise = ();

    fn draw_noise(&self, _rows: usize, _rng: &mut ChaCha8Rng) {}

    fn param_info(&self) -> Vec<ParamInfo> {
        self.info()
    }

    fn params(&self) -> Vec<&[f64]> {
        self.slices()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.slices_mut()
    }

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> f64 {
        xent_loss(self.logits(x).view(), labels)
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> (f64, GradientSet) {
        let trace = self.trace(x, None);
        let (loss, g) = softmax_xent(trace.logits.view(), labels);
        (loss, self.backward(&trace, g, None))
    }
}
