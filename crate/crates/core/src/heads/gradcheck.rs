use ndarray::ArrayView2;

use super::{Differentiable, GradientSet};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter block and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

pub fn analytic_gradients<H: Differentiable>(
    head: &H,
    x: ArrayView2<f64>,
    labels: &[usize],
    noise: &H::Noise,
) -> GradientSet {
    head.loss_and_grad(x, labels, noise).1
}

/// Compares analytic gradients with central differences under fixed noise.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check<H: Differentiable + Clone>(
    head: &H,
    x: ArrayView2<f64>,
    labels: &[usize],
    noise: &H::Noise,
    step: f64,
) -> GradCheckReport {
    let analytic = analytic_gradients(head, x, labels, noise);
    let names: Vec<String> = head.param_info().into_iter().map(|p| p.name).collect();
    let mut probe = head.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for (b, name) in names.iter().enumerate() {
        let grad = analytic.get(name).expect("gradient block for every parameter");
        for i in 0..grad.len() {
            let orig = probe.params()[b][i];
            probe.params_mut()[b][i] = orig + step;
            let up = probe.loss(x, labels, noise);
            probe.params_mut()[b][i] = orig - step;
            let down = probe.loss(x, labels, noise);
            probe.params_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
        }
    }
    report
}
