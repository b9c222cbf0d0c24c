use ndarray::{Array2, ArrayView2};

use super::{Classifier, Head};
use crate::linalg::RunningMean;

/// Independently trained heads; predicts the mean of member probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHead {
    pub members: Vec<Head>,
}

impl Classifier for EnsembleHead {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn predict_probs(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut mean = RunningMean::new();
        for m in &self.members {
            mean.push(m.predict_probs(x));
        }
        mean.finish().expect("ensemble has members")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::LinearSoftmaxHead;
    use ndarray::array;

    #[test]
    fn identical_members_match_single_head() {
        let h = LinearSoftmaxHead {
            weights: array![[0.3, -0.7, 1.1], [0.2, 0.4, -0.9]],
            bias: array![0.1, 0.0, -0.2],
        };
        let x = array![[1.0, 2.0], [-0.5, 0.3], [3.0, -1.0]];
        for m in [1, 3, 4, 7] {
            let e = EnsembleHead {
                members: vec![Head::Linear(h.clone()); m],
            };
            assert_eq!(e.predict_probs(x.view()), h.predict_probs(x.view()));
        }
    }
}
