//! Small dense linear-algebra and softmax helpers shared across modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn factor(a: ArrayView2<f64>) -> Result<Self, NotPositiveDefinite> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky needs a square matrix");
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn inv_quad_form(&self, b: ArrayView1<f64>) -> f64 {
        self.solve_lower(b).iter().map(|v| v * v).sum()
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn logsumexp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = row.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax(row.view());
        row.assign(&p);
    }
    out
}

/// Incremental mean: `m_i = m_{i-1} + (x_i - m_{i-1}) / i`.
///
/// Averaging `M` bitwise-identical arrays this way returns the input bits
/// unchanged for any `M`.
#[derive(Debug, Default)]
pub struct RunningMean {
    mean: Option<Array2<f64>>,
    count: usize,
}

impl RunningMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: Array2<f64>) {
        self.count += 1;
        match &mut self.mean {
            None => self.mean = Some(x),
            Some(m) => {
                let n = self.count as f64;
                ndarray::Zip::from(m).and(&x).for_each(|m, &v| *m += (v - *m) / n);
            }
        }
    }

    pub fn finish(self) -> Option<Array2<f64>> {
        self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let c = Cholesky::factor(a.view()).unwrap();
        let back = c.lower().dot(&c.lower().t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(Cholesky::factor(a.view()).unwrap_err().pivot, 1);
    }

    #[test]
    fn inv_quad_form_matches_diagonal_case() {
        let a = array![[4.0, 0.0], [0.0, 0.25]];
        let c = Cholesky::factor(a.view()).unwrap();
        let q = c.inv_quad_form(array![2.0, 1.0].view());
        assert!((q - (1.0 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
        assert_eq!(argmax(array![0.1, 0.45, 0.45].view()), 1);
    }

    #[test]
    fn running_mean_of_identical_is_identity() {
        let x = array![[0.1, 0.7, 0.2], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        for m in 1..8 {
            let mut rm = RunningMean::new();
            for _ in 0..m {
                rm.push(x.clone());
            }
            assert_eq!(rm.finish().unwrap(), x);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(array![1.0, 2.0, 3.0].view());
        let b = softmax(array![101.0, 102.0, 103.0].view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((logsumexp(array![0.0, 0.0].view()) - 2f64.ln()).abs() < 1e-15);
    }
}
