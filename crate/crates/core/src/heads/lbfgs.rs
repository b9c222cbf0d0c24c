//! Multinomial logistic regression fitted with L-BFGS and a strong-Wolfe
//! line search.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_inputs, softmax_xent, HeadError, LinearSoftmaxHead};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 40;
/// Relative objective change treated as roundoff by the approximate Wolfe test.
const APPROX_EPS: f64 = 1e-10;
/// Iteration cap applied when `l2 = 0` and the data are separable.
pub const SEPARABLE_ITER_CAP: usize = 100;
const PERCEPTRON_EPOCHS: usize = 1000;

fn default_l2() -> f64 {
    1e-3
}
fn default_max_iters() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}
fn default_memory() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsOptions {
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop when the Euclidean gradient norm falls to this value.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_memory")]
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            l2: default_l2(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            memory: default_memory(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub head: LinearSoftmaxHead,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Set when `l2 = 0` and the perceptron pre-check separated the data.
    pub separable: bool,
    pub objective: f64,
}

struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    labels: &'a [usize],
    k: usize,
    l2: f64,
}

impl Objective<'_> {
    fn unpack(&self, theta: &[f64]) -> LinearSoftmaxHead {
        let d = self.x.ncols();
        let w = Array2::from_shape_vec((d, self.k), theta[..d * self.k].to_vec()).expect("theta layout");
        let b = Array1::from_vec(theta[d * self.k..].to_vec());
        LinearSoftmaxHead { weights: w, bias: b }
    }

    /// Mean cross-entropy plus `(l2 / 2) |W|^2`; the bias is unpenalized.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let head = self.unpack(theta);
        let (ce, g) = softmax_xent(head.logits(self.x).view(), self.labels);
        let dw = self.x.t().dot(&g);
        let db = g.sum_axis(Axis(0));
        let nw = self.x.ncols() * self.k;
        let reg: f64 = theta[..nw].iter().map(|v| v * v).sum::<f64>() * 0.5 * self.l2;
        let mut grad: Vec<f64> = dw.into_iter().collect();
        for (gi, ti) in grad.iter_mut().zip(&theta[..nw]) {
            *gi += self.l2 * ti;
        }
        grad.extend(db);
        (ce + reg, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

/// Multiclass perceptron with bias; true if it reaches an error-free epoch.
fn perceptron_separable(x: ArrayView2<f64>, labels: &[usize], k: usize) -> bool {
    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((d + 1, k));
    for _ in 0..PERCEPTRON_EPOCHS {
        let mut errors = 0;
        for (row, &y) in x.axis_iter(Axis(0)).zip(labels) {
            let score = |c: usize| row.dot(&w.column(c).slice(ndarray::s![..d])) + w[[d, c]];
            let scores: Vec<f64> = (0..k).map(score).collect();
            let pred = crate::linalg::argmax(ndarray::ArrayView1::from(&scores));
            let best_other = (0..k).filter(|&c| c != y).map(|c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
            if pred != y || scores[y] <= best_other {
                errors += 1;
                let wrong = (0..k)
                    .filter(|&c| c != y)
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                    .expect("k >= 2");
                for j in 0..d {
                    w[[j, y]] += row[j];
                    w[[j, wrong]] -= row[j];
                }
                w[[d, y]] += 1.0;
                w[[d, wrong]] -= 1.0;
            }
        }
        if errors == 0 {
            return true;
        }
    }
    false
}

struct LineResult {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
}

/// Cubic-interpolated step in `[lo, hi]`, falling back to bisection.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, d0) = lo;
    let (a1, f1, d1) = hi;
    let t1 = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = t1 * t1 - d0 * d1;
    let (left, right) = (a0.min(a1), a0.max(a1));
    let width = right - left;
    if disc >= 0.0 {
        let t2 = (a1 - a0).signum() * disc.sqrt();
        let a = a1 - (a1 - a0) * (d1 + t2 - t1) / (d1 - d0 + 2.0 * t2);
        if a.is_finite() && a > left + 0.1 * width && a < right - 0.1 * width {
            return a;
        }
    }
    0.5 * (a0 + a1)
}

/// Sufficient decrease. Near the optimum the objective changes by less than
/// its rounding error, so a step whose directional derivative has dropped
/// enough also counts when `f` rose by no more than roundoff.
fn decreases(f0: f64, dphi0: f64, alpha: f64, f: f64, dphi: f64) -> bool {
    f <= f0 + C1 * alpha * dphi0 || (f <= f0 + APPROX_EPS * f0.abs() && dphi <= (2.0 * C1 - 1.0) * dphi0)
}

fn strong_wolfe(obj: &Objective, x: &[f64], f0: f64, g0: &[f64], dir: &[f64], alpha0: f64) -> Option<LineResult> {
    let dphi0 = dot(g0, dir);
    let mut prev = (0.0, f0, dphi0);
    let mut alpha = alpha0;
    for i in 0..MAX_BRACKET {
        let (f, g) = obj.eval(&axpy(x, alpha, dir));
        let dphi = dot(&g, dir);
        if !f.is_finite() {
            alpha = 0.5 * (prev.0 + alpha);
            continue;
        }
        if !decreases(f0, dphi0, alpha, f, dphi) || (i > 0 && f > prev.1) {
            return zoom(obj, x, f0, dphi0, dir, prev, (alpha, f, dphi));
        }
        if dphi.abs() <= -C2 * dphi0 {
            return Some(LineResult { alpha, f, g });
        }
        if dphi >= 0.0 {
            return zoom(obj, x, f0, dphi0, dir, (alpha, f, dphi), prev);
        }
        prev = (alpha, f, dphi);
        alpha *= 2.0;
    }
    None
}

fn zoom(
    obj: &Objective,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    dir: &[f64],
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<LineResult> {
    for _ in 0..MAX_ZOOM {
        let alpha = interpolate(lo, hi);
        let (f, g) = obj.eval(&axpy(x, alpha, dir));
        let dphi = dot(&g, dir);
        if !decreases(f0, dphi0, alpha, f, dphi) || f > lo.1 {
            hi = (alpha, f, dphi);
        } else {
            if dphi.abs() <= -C2 * dphi0 {
                return Some(LineResult { alpha, f, g });
            }
            if dphi * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, f, dphi);
        }
        if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(1.0) {
            break;
        }
    }
    None
}

/// Minimizes mean cross-entropy plus `(l2 / 2) |W|^2` from a zero start.
pub fn lbfgs_logreg(
    x: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    opts: &LbfgsOptions,
) -> Result<LbfgsOutcome, HeadError> {
    check_inputs(x, labels, num_classes)?;
    if !(opts.l2 >= 0.0) || opts.memory == 0 {
        return Err(HeadError::Config(format!("need l2 >= 0 and memory > 0, got {}, {}", opts.l2, opts.memory)));
    }
    let mut max_iters = opts.max_iters;
    let mut separable = false;
    if opts.l2 == 0.0 && perceptron_separable(x, labels, num_classes) {
        separable = true;
        max_iters = max_iters.min(SEPARABLE_ITER_CAP);
        log::warn!("data are linearly separable and l2 = 0; capping L-BFGS at {max_iters} iterations");
    }
    let obj = Objective {
        x,
        labels,
        k: num_classes,
        l2: opts.l2,
    };
    let dim = (x.ncols() + 1) * num_classes;
    let mut theta = vec![0.0; dim];
    let (mut f, mut g) = obj.eval(&theta);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut gnorm = norm(&g);
    while gnorm > opts.tol && iterations < max_iters {
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if history.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let Some(step) = strong_wolfe(&obj, &theta, f, &g, &dir, alpha0) else {
            return Err(HeadError::LineSearch {
                iteration: iterations + 1,
                grad_norm: gnorm,
                last: Box::new(obj.unpack(&theta)),
            });
        };
        iterations += 1;
        let s: Vec<f64> = dir.iter().map(|v| step.alpha * v).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        for (t, si) in theta.iter_mut().zip(&s) {
            *t += si;
        }
        f = step.f;
        g = step.g;
        gnorm = norm(&g);
    }
    let converged = gnorm <= opts.tol;
    if !converged {
        log::warn!("L-BFGS stopped after {iterations} iterations with gradient norm {gnorm:e}");
    }
    Ok(LbfgsOutcome {
        head: obj.unpack(&theta),
        iterations,
        grad_norm: gnorm,
        converged,
        separable,
        objective: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn symmetric_data_gives_zero_bias() {
        let x = array![[1.0, 0.5], [2.0, -0.3], [0.7, 1.1], [-1.0, -0.5], [-2.0, 0.3], [-0.7, -1.1]];
        let y = [0, 0, 0, 1, 1, 1];
        let out = lbfgs_logreg(x.view(), &y, 2, &LbfgsOptions { l2: 0.1, tol: 1e-10, ..Default::default() }).unwrap();
        assert!(out.converged);
        assert!(out.head.bias.iter().all(|b| b.abs() <= 1e-12), "{:?}", out.head.bias);
    }

    #[test]
    fn converges_below_objective_roundoff() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64 / 5.0 - 1.0);
        let y: Vec<usize> = (0..40).map(|i| (i * 5 + i / 3) % 3).collect();
        let opts = LbfgsOptions { l2: 1e-2, tol: 1e-11, max_iters: 10_000, ..Default::default() };
        let out = lbfgs_logreg(x.view(), &y, 3, &opts).unwrap();
        assert!(out.converged, "gradient norm {}", out.grad_norm);
    }

    #[test]
    fn overlapping_data_is_not_separable() {
        let x = array![[0.0], [1.0], [0.5], [0.5]];
        assert!(!perceptron_separable(x.view(), &[0, 1, 0, 1], 2));
        let x = array![[0.0], [1.0]];
        assert!(perceptron_separable(x.view(), &[0, 1], 2));
    }

    #[test]
    fn separable_unregularized_is_capped() {
        let x = array![[-1.0], [-2.0], [1.0], [2.0]];
        let out = lbfgs_logreg(x.view(), &[0, 0, 1, 1], 2, &LbfgsOptions { l2: 0.0, ..Default::default() }).unwrap();
        assert!(out.separable);
        assert!(out.iterations <= SEPARABLE_ITER_CAP);
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let x = array![[0.3, -1.0], [1.2, 0.4], [-0.8, 0.9]];
        let y = [2, 0, 1];
        let obj = Objective {
            x: x.view(),
            labels: &y,
            k: 3,
            l2: 0.7,
        };
        let theta: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, g) = obj.eval(&theta);
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[i] += h;
            let mut down = theta.clone();
            down[i] -= h;
            let num = (obj.eval(&up).0 - obj.eval(&down).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}
