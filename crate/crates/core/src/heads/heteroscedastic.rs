use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::linear::LinearSoftmaxHead;
use super::mc_dropout::EVAL_STREAM;
use super::{Classifier, Differentiable, GradientSet, ParamInfo};
use crate::linalg::{logsumexp, softmax, RunningMean};

/// Temperatures tried when tuning on validation data.
pub const TEMPERATURE_GRID: [f64; 6] = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0];

/// Input-dependent Gaussian noise on the logits, `N(mu(x), V V^T + diag(d^2))`,
/// with `p(y|x) = E[softmax(u / tau)]` estimated by sampling.
///
/// `mu`, `V` and `d` are all linear in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroscedasticHead {
    pub mean: LinearSoftmaxHead,
    /// `[D x (K * R)]`; column `k * R + r` holds `V[k, r]`.
    pub low_rank: Array2<f64>,
    /// `[D x K]`
    pub diag: Array2<f64>,
    pub rank: usize,
    pub temperature: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

/// Standard normal draws for a batch, `[rows x samples x R]` and
/// `[rows x samples x K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HetNoise {
    pub low_rank: Array3<f64>,
    pub diag: Array3<f64>,
}

impl HeteroscedasticHead {
    pub fn default_rank(num_classes: usize) -> usize {
        (num_classes - 1).min(15)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_dim: usize,
        num_classes: usize,
        rank: usize,
        temperature: f64,
        train_samples: usize,
        eval_samples: usize,
        eval_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mean = LinearSoftmaxHead::init(input_dim, num_classes, rng);
        let dist = Normal::new(0.0, 0.01).expect("valid normal");
        let low_rank = Array2::from_shape_fn((input_dim, num_classes * rank), |_| dist.sample(rng));
        let diag = Array2::from_shape_fn((input_dim, num_classes), |_| dist.sample(rng));
        Self {
            mean,
            low_rank,
            diag,
            rank,
            temperature,
            train_samples,
            eval_samples,
            eval_seed,
        }
    }

    fn k(&self) -> usize {
        self.mean.weights.ncols()
    }

    /// Sampled logits for one row: `mu + V eps_r + d * eps_k`, divided by `tau`.
    fn sample_logits(
        &self,
        mu: &Array1<f64>,
        v: &Array2<f64>,
        d: &Array1<f64>,
        eps_r: ArrayView2<f64>,
        eps_k: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut u = eps_r.dot(&v.t());
        u += &(&eps_k * d);
        u += mu;
        if self.temperature != 1.0 {
            u.mapv_inplace(|z| z / self.temperature);
        }
        u
    }

    fn row_params(&self, mu: &Array2<f64>, v: &Array2<f64>, d: &Array2<f64>, i: usize) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let k = self.k();
        let vi = v
            .row(i)
            .to_owned()
            .into_shape_with_order((k, self.rank))
            .expect("K * R columns");
        (mu.row(i).to_owned(), vi, d.row(i).to_owned())
    }

    fn projections(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (self.mean.logits(x), x.dot(&self.low_rank), x.dot(&self.diag))
    }

    /// Per-row loss `-log mean_s softmax(u_s)[y]` and `dL/du_s` (already
    /// scaled by `1/tau`), computed with the pathwise estimator.
    fn row_loss(&self, u: &Array2<f64>, y: usize, want_grad: bool) -> (f64, Option<Array2<f64>>) {
        let s = u.nrows();
        let lse: Vec<f64> = u.axis_iter(Axis(0)).map(logsumexp).collect();
        let logp: Array1<f64> = (0..s).map(|j| u[[j, y]] - lse[j]).collect();
        let total = logsumexp(logp.view());
        let loss = (s as f64).ln() - total;
        if !want_grad {
            return (loss, None);
        }
        let w = softmax(logp.view());
        let mut g = Array2::zeros(u.raw_dim());
        for j in 0..s {
            let p = softmax(u.row(j));
            let mut gj = g.row_mut(j);
            gj.assign(&p);
            gj[y] -= 1.0;
            let scale = w[j] / self.temperature;
            gj.mapv_inplace(|v| v * scale);
        }
        (loss, Some(g))
    }
}

impl Classifier for HeteroscedasticHead {
    fn input_dim(&self) -> usize {
        self.mean.weights.nrows()
    }

    fn num_classes(&self) -> usize {
        self.k()
    }

    /// Shares one draw of `eval_samples` noise vectors across rows, so a
    /// row's prediction does not depend on its batch.
    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let k = self.k();
        let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
        rng.set_stream(EVAL_STREAM);
        let eps_r = Array2::from_shape_fn((self.eval_samples, self.rank), |_| StandardNormal.sample(&mut rng));
        let eps_k = Array2::from_shape_fn((self.eval_samples, k), |_| StandardNormal.sample(&mut rng));
        let (mu, v, d) = self.projections(x);
        let mut out = Array2::zeros((x.nrows(), k));
        for i in 0..x.nrows() {
            let (mu_i, v_i, d_i) = self.row_params(&mu, &v, &d, i);
            let u = self.sample_logits(&mu_i, &v_i, &d_i, eps_r.view(), eps_k.view());
            let mut mean = RunningMean::new();
            for row in u.axis_iter(Axis(0)) {
                mean.push(softmax(row).insert_axis(Axis(0)));
            }
            out.row_mut(i).assign(&mean.finish().expect("eval_samples > 0").row(0));
        }
        out
    }
}

impl Differentiable for HeteroscedasticHead {
    type Noise = HetNoise;

    fn draw_noise(&self, rows: usize, rng: &mut ChaCha8Rng) -> HetNoise {
        let s = self.train_samples;
        HetNoise {
            low_rank: Array3::from_shape_fn((rows, s, self.rank), |_| StandardNormal.sample(rng)),
            diag: Array3::from_shape_fn((rows, s, self.k()), |_| StandardNormal.sample(rng)),
        }
    }

    fn param_info(&self) -> Vec<ParamInfo> {
        vec![
            ParamInfo::new("mean.weights", true),
            ParamInfo::new("mean.bias", false),
            ParamInfo::new("low_rank", true),
            ParamInfo::new("diag", true),
        ]
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.mean.params();
        p.push(self.low_rank.as_slice().expect("standard layout"));
        p.push(self.diag.as_slice().expect("standard layout"));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.mean.params_mut();
        p.push(self.low_rank.as_slice_mut().expect("standard layout"));
        p.push(self.diag.as_slice_mut().expect("standard layout"));
        p
    }

    fn loss(&self, x: ArrayView2<f64>, labels: &[usize], noise: &HetNoise) -> f64 {
        let (mu, v, d) = self.projections(x);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (mu_i, v_i, d_i) = self.row_params(&mu, &v, &d, i);
            let u = self.sample_logits(
                &mu_i,
                &v_i,
                &d_i,
                noise.low_rank.slice(s![i, .., ..]),
                noise.diag.slice(s![i, .., ..]),
            );
            total += self.row_loss(&u, y, false).0;
        }
        total / labels.len() as f64
    }

    fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize], noise: &HetNoise) -> (f64, GradientSet) {
        let n = labels.len();
        let k = self.k();
        let r = self.rank;
        let (mu, v, d) = self.projections(x);
        let mut g_mu = Array2::<f64>::zeros((n, k));
        let mut g_v = Array2::<f64>::zeros((n, k * r));
        let mut g_d = Array2::<f64>::zeros((n, k));
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (mu_i, v_i, d_i) = self.row_params(&mu, &v, &d, i);
            let eps_r = noise.low_rank.slice(s![i, .., ..]);
            let eps_k = noise.diag.slice(s![i, .., ..]);
            let u = self.sample_logits(&mu_i, &v_i, &d_i, eps_r, eps_k);
            let (loss, g) = self.row_loss(&u, y, true);
            let g = g.expect("requested");
            total += loss;
            g_mu.row_mut(i).assign(&g.sum_axis(Axis(0)));
            // dV[k, r] = sum_s g[s, k] eps_r[s, r]
            let gv = g.t().dot(&eps_r);
            g_v.row_mut(i)
                .assign(&gv.into_shape_with_order(k * r).expect("K * R entries"));
            g_d.row_mut(i).assign(&(&g * &eps_k).sum_axis(Axis(0)));
        }
        let scale = 1.0 / n as f64;
        let flat = |a: Array2<f64>| -> Vec<f64> { a.into_iter().map(|v| v * scale).collect() };
        let blocks = vec![
            ("mean.weights".into(), flat(x.t().dot(&g_mu))),
            ("mean.bias".into(), g_mu.sum_axis(Axis(0)).iter().map(|v| v * scale).collect()),
            ("low_rank".into(), flat(x.t().dot(&g_v))),
            ("diag".into(), flat(x.t().dot(&g_d))),
        ];
        (total * scale, GradientSet { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_noise_head(k: usize, rank: usize, samples: usize) -> HeteroscedasticHead {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = HeteroscedasticHead::init(2, k, rank, 1.0, 4, samples, 9, &mut rng);
        h.low_rank.fill(0.0);
        h.diag.fill(0.0);
        h
    }

    #[test]
    fn zero_noise_reduces_to_softmax() {
        let h = zero_noise_head(3, 2, 37);
        let x = array![[0.5, -2.0], [3.0, 1.0]];
        assert_eq!(h.predict_probs(x.view()), h.mean.predict_probs(x.view()));
    }

    #[test]
    fn zero_noise_loss_is_cross_entropy() {
        let h = zero_noise_head(3, 2, 5);
        let x = array![[0.5, -2.0], [3.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = h.draw_noise(2, &mut rng);
        let ce = h.mean.loss(x.view(), &[2, 0], &());
        assert!((h.loss(x.view(), &[2, 0], &noise) - ce).abs() < 1e-14);
    }

    #[test]
    fn rank_zero_is_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = HeteroscedasticHead::init(2, 2, 0, 1.0, 3, 10, 0, &mut rng);
        let p = h.predict_probs(array![[1.0, 1.0]].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_rank_caps_at_fifteen() {
        assert_eq!(HeteroscedasticHead::default_rank(2), 1);
        assert_eq!(HeteroscedasticHead::default_rank(100), 15);
    }
}
