use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::linear::LinearSoftmaxHead;
use super::{softmax_xent, xent_loss, Classifier, Differentiable, GradientSet, ParamInfo};
use crate::linalg::{softmax_rows, RunningMean};

/// Rank-1 BatchEnsemble dense layer. Member `i` computes
/// `((a * r_i) W0) * s_i + b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeLayer {
    /// Shared slow weights `[in x out]`.
    pub w0: Array2<f64>,
    /// Input fast weights `[M x in]`.
    pub r: Array2<f64>,
    /// Output fast weights `[M x out]`.
    pub s: Array2<f64>,
    /// `[M x out]`
    pub bias: Array2<f64>,
}

struct LayerTrace {
    input: Array2<f64>,
    scaled_input: Array2<f64>,
    pre_scale: Array2<f64>,
}

impl BeLayer {
    /// LeCun-normal `W0`, random-sign fast weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, members: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid normal");
        let mut sign = || if rng.random::<bool>() { 1.0 } else { -1.0 };
        let r = Array2::from_shape_fn((members, inputs), |_| sign());
        let s = Array2::from_shape_fn((members, outputs), |_| sign());
        Self {
            w0: Array2::from_shape_fn((inputs, outputs), |_| dist.sample(rng)),
            r,
            s,
            bias: Array2::zeros((members, outputs)),
        }
    }

    pub fn members(&self) -> usize {
        self.r.nrows()
    }

    fn forward(&self, a: &Array2<f64>, m: usize) -> (Array2<f64>, LayerTrace) {
        let scaled_input = a * &self.r.row(m);
        let pre_scale = scaled_input.dot(&self.w0);
        let z = &pre_scale * &self.s.row(m) + &self.bias.row(m);
        (
            z,
            LayerTrace {
                input: a.clone(),
                scaled_input,
                pre_scale,
            },
        )
    }

    /// Accumulates member `m`'s gradients and returns `dL/da`.
    fn backward(&self, t: &LayerTrace, dz: &Array2<f64>, m: usize, g: &mut LayerGrads) -> Array2<f64> {
        let mut ds = g.s.row_mut(m);
        ds += &(dz * &t.pre_scale).sum_axis(Axis(0));
        let mut db = g.bias.row_mut(m);
        db += &dz.sum_axis(Axis(0));
        let dv = dz * &self.s.row(m);
        g.w0 += &t.scaled_input.t().dot(&dv);
        let du = dv.dot(&self.w0.t());
        let mut dr = g.r.row_mut(m);
        dr += &(&du * &t.input).sum_axis(Axis(0));
        du * &self.r.row(m)
    }

    fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            w0: Array2::zeros(self.w0.raw_dim()),
            r: Array2::zeros(self.r.raw_dim()),
            s: Array2::zeros(self.s.raw_dim()),
            bias: Array2::zeros(self.bias.raw_dim()),
        }
    }

    /// Parameters shared by all members.
    pub fn shared_param_count(&self) -> usize {
        self.w0.len()
    }

    /// Per-member parameters: fast weights and bias.
    pub fn member_param_count(&self) -> usize {
        self.r.len() + self.s.len() + self.bias.len()
    }
}

struct LayerGrads {
    w0: Array2<f64>,
    r: Array2<f64>,
    s: Array2<f64>,
    bias: Array2<f64>,
}

impl LayerGrads {
    fn into_blocks(self, prefix: &str, scale: f64, out: &mut Vec<(String, Vec<f64>)>) {
        let f = |a: Array2<f64>| -> Vec<f64> { a.into_iter().map(|v| v * scale).collect() };
        out.push((format!("{prefix}.w0"), f(self.w0)));
        out.push((format!("{prefix}.r"), f(self.r)));
        out.push((format!("{prefix}.s"), f(self.s)));
        out.push((format!("{prefix}.bias"), f(self.bias)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BeOutput {
    Shared(BeLayer),
    PerMember(Vec<LinearSoftmaxHead>),
}

/// tanh MLP of BatchEnsemble layers; the prediction is the mean of the
/// member softmaxes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEnsembleHead {
    pub hidden: Vec<BeLayer>,
    pub output: BeOutput,
    members: usize,
}

impl BatchEnsembleHead {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        members: usize,
        per_member_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            layers.push(BeLayer::init(width, h, members, rng));
            width = h;
        }
        let output = if per_member_output {
            let dist = Normal::new(0.0, (1.0 / width as f64).sqrt()).expect("valid normal");
            BeOutput::PerMember(
                (0..members)
                    .map(|_| LinearSoftmaxHead {
                        weights: Array2::from_shape_fn((width, num_classes), |_| dist.sample(rng)),
                        bias: ndarray::Array1::zeros(num_classes),
                    })
                    .collect(),
            )
        } else {
            BeOutput::Shared(BeLayer::init(width, num_classes, members, rng))
        };
        Self {
            hidden: layers,
            output,
            members,
        }
    }

    pub fn from_parts(hidden: Vec<BeLayer>, output: BeOutput) -> Self {
        let members = match &output {
            BeOutput::Shared(l) => l.members(),
            BeOutput::PerMember(v) => v.len(),
        };
        Self {
            hidden,
            output,
            members,
        }
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn shared_param_count(&self) -> usize {
        let out = match &self.output {
            BeOutput::Shared(l) => l.shared_param_count(),
            BeOutput::PerMember(_) => 0,
        };
        self.hidden.iter().map(BeLayer::shared_param_count).sum::<usize>() + out
    }

    /// Parameters that exist once per member.
    pub fn member_param_count(&self) -> usize {
        let out = match &self.output {
            BeOutput::Shared(l) => l.member_param_count(),
            BeOutput::PerMember(v) => v.iter().map(|h| h.weights.len() + h.bias.len()).sum(),
        };
        self.hidden.iter().map(BeLayer::member_param_count).sum::<usize>() + out
    }

    fn member_forward(&self, x: ArrayView2<f64>, m: usize) -> (Array2<f64>, Vec<LayerTrace>, Array2<f64>) {
        let mut traces = Vec::with_capacity(self.hidden.len() + 1);
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let (z, t) = layer.forward(&h, m);
            traces.push(t);
            h = z.mapv(f64::tanh);
        }
        let logits = match &self.output {
            BeOutput::Shared(layer) => {
                let (z, t) = layer.forward(&h, m);
                traces.push(t);
                z
            }
            BeOutput::PerMember(heads) => heads[m].logits(h.view()),
        };
        (logits, traces, h)
    }

    /// Logits of member `m`.
    pub fn member_logits(&self, x: ArrayView2<f64>, m: usize) -> Array2<f64> {
        self.member_forward(x, m).0
    }
}

impl Classifier for BatchEnsembleHead {
    fn input_dim(&self) -> usize {
        match (self.hidden.first(), &self.output) {
            (Some(l), _) => l.w0.nrows(),
            (None, BeOutput::Shared(l)) => l.w0.nrows(),
            (None, BeOutput::PerMember(v)) => v[0].weights.nrows(),
        }
    }

    fn num_classes(&self) -> usize {
        match &self.output {
            BeOutput::Shared(l) => l.w0.ncols(),
            BeOutput::PerMember(v) => v[0].weights.ncols(),
        }
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut mean = RunningMean::new();
        for m in 0..self.members {
            mean.push(softmax_rows(self.member_logits(x, m).view()));
        }
        mean.finish().expect("at least one member")
    }
}

impl Differentiable for BatchEnsembleHead {
    type Noise = ();

    fn draw_noise(&self, _rows: usize, _rng: &mut ChaCha8Rng) {}

    fn param_info(&self) -> Vec<ParamInfo> {
        let layer = |p: String| {
            vec![
                ParamInfo::new(format!("{p}.w0"), true),
                ParamInfo::new(format!("{p}.r"), false),
                ParamInfo::new(format!("{p}.s"), false),
                ParamInfo::new(format!("{p}.bias"), false),
            ]
        };
        let mut info: Vec<ParamInfo> = (0..self.hidden.len()).flat_map(|l| layer(format!("hidden{l}"))).collect();
        match &self.output {
            BeOutput::Shared(_) => info.extend(layer("output".into())),
            BeOutput::PerMember(v) => {
                for m in 0..v.len() {
                    info.push(ParamInfo::new(format!("member{m}.weights"), true));
                    info.push(ParamInfo::new(format!("member{m}.bias"), false));
                }
            }
        }
        info
    }

    fn params(&self) -> Vec<&[f64]> {
        fn layer(l: &BeLayer) -> [&[f64]; 4] {
            [&l.w0, &l.r, &l.s, &l.bias].map(|a| a.as_slice().expect("standard layout"))
        }
        let mut p: Vec<&[f64]> = self.hidden.iter().flat_map(layer).collect();
        match &self.output {
            BeOutput::Shared(l) => p.extend(layer(l)),
            BeOutput::PerMember(v) => {
                for h in v {
                    p.extend(h.params());
                }
            }
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = Vec::new();
        for l in &mut self.hidden {
            for a in [&mut l.w0, &mut l.r, &mut l.s, &mut l.bias] {
                p.push(a.as_slice_mut().expect("standard layout"));
            }
        }
        match &mut self.output {
            BeOutput::Shared(l) => {
                for a in [&mut l.w0, &mut l.r, &mut l.s, &mut l.bias] {
                    p.push(a.as_slice_mut().expect("standard layout"));
                }
            }
            BeOutput::PerMember(v) => {
                for h in v {
                    p.extend(h.params_mut());
                }
            }
        }
        p
    }

    /// Mean over members of each member's cross-entropy.
    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> f64 {
        let total: f64 = (0..self.members)
            .map(|m| xent_loss(self.member_logits(x, m).view(), labels))
            .sum();
        total / self.members as f64
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], _noise: &()) -> (f64, GradientSet) {
        let mut hidden_grads: Vec<LayerGrads> = self.hidden.iter().map(BeLayer::zero_grads).collect();
        let mut shared_out = match &self.output {
            BeOutput::Shared(l) => Some(l.zero_grads()),
            BeOutput::PerMember(_) => None,
        };
        let mut member_out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut total = 0.0;
        for m in 0..self.members {
            let (logits, traces, last_hidden) = self.member_forward(x, m);
            let (loss, g) = softmax_xent(logits.view(), labels);
            total += loss;
            let mut da = match &self.output {
                BeOutput::Shared(layer) => {
                    let t = &traces[self.hidden.len()];
                    layer.backward(t, &g, m, shared_out.as_mut().expect("shared"))
                }
                BeOutput::PerMember(heads) => {
                    member_out.push((
                        last_hidden.t().dot(&g).into_iter().collect(),
                        g.sum_axis(Axis(0)).to_vec(),
                    ));
                    g.dot(&heads[m].weights.t())
                }
            };
            for l in (0..self.hidden.len()).rev() {
                // Hidden layer l produced tanh(z); its output is the next layer's input.
                let out = if l + 1 < traces.len() {
                    traces[l + 1].input.clone()
                } else {
                    last_hidden.clone()
                };
                let dz = da * out.mapv(|v| 1.0 - v * v);
                da = self.hidden[l].backward(&traces[l], &dz, m, &mut hidden_grads[l]);
            }
        }
        let scale = 1.0 / self.members as f64;
        let mut blocks = Vec::new();
        for (l, g) in hidden_grads.into_iter().enumerate() {
            g.into_blocks(&format!("hidden{l}"), scale, &mut blocks);
        }
        match shared_out {
            Some(g) => g.into_blocks("output", scale, &mut blocks),
            None => {
                for (m, (w, b)) in member_out.into_iter().enumerate() {
                    blocks.push((format!("member{m}.weights"), w.into_iter().map(|v| v * scale).collect()));
                    blocks.push((format!("member{m}.bias"), b.into_iter().map(|v| v * scale).collect()));
                }
            }
        }
        (total * scale, GradientSet { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::mlp::{Dense, Mlp};
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_fast_weights_match_shared_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut be = BatchEnsembleHead::init(3, &[5], 4, 4, false, &mut rng);
        let mut layers = Vec::new();
        for l in be.hidden.iter_mut().chain(match &mut be.output {
            BeOutput::Shared(l) => Some(l),
            BeOutput::PerMember(_) => None,
        }) {
            l.r.fill(1.0);
            l.s.fill(1.0);
            let width = l.bias.ncols();
            let b0 = array![0.1, -0.2, 0.3, 0.05, 0.0].slice(ndarray::s![..width]).to_owned();
            for mut row in l.bias.axis_iter_mut(Axis(0)) {
                row.assign(&b0);
            }
            layers.push(Dense {
                w: l.w0.clone(),
                b: b0,
            });
        }
        let mlp = Mlp { layers };
        let x = array![[0.2, -1.0, 0.7], [1.1, 0.0, -0.3]];
        assert_eq!(be.predict_probs(x.view()), mlp.predict_probs(x.view()));
    }

    #[test]
    fn per_member_parameters_are_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let be = BatchEnsembleHead::init(10, &[20], 5, 4, false, &mut rng);
        assert_eq!(be.shared_param_count(), 10 * 20 + 20 * 5);
        assert_eq!(be.member_param_count(), 4 * (10 + 20 + 20) + 4 * (20 + 5 + 5));
    }

    #[test]
    fn fast_weights_are_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let be = BatchEnsembleHead::init(6, &[], 3, 4, false, &mut rng);
        let BeOutput::Shared(l) = &be.output else { panic!() };
        assert!(l.r.iter().chain(l.s.iter()).all(|&v| v == 1.0 || v == -1.0));
    }
}
