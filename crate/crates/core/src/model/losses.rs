use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Batch of class probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Tensor);

impl ProbBatch {
    pub const ROW_SUM_TOL: f64 = 1e-12;

    pub fn new(p: Tensor) -> Result<Self> {
        if !p.is_matrix() {
            return Err(Error::contract("ProbBatch", "expected a b×K matrix"));
        }
        for (j, row) in p.data().chunks(p.cols()).enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(
                    "ProbBatch",
                    format!("row {j} has entries outside [0,1]"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::contract("ProbBatch", format!("row {j} sums to {s}")));
            }
        }
        Ok(ProbBatch(p))
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        ProbBatch(crate::tensor::softmax_rows(logits))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }
}

/// Labeled cross-entropy `L`, unlabeled entropy `H`, and their weight `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l: f64,
    pub h: f64,
    pub lambda: f64,
}

/// `-(1/b) Σ_j log p(ŷ_j | x_j)` on the tape, via a stable log-softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    tape.nll_rows(logp, labels)
}

/// `-(1/b) Σ_j Σ_i p_ji log p_ji` on the tape.
pub fn entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = tape.value(logits).rows();
    let p = tape.softmax_rows(logits)?;
    let logp = tape.log_softmax_rows(logits)?;
    let plogp = tape.hadamard(p, logp)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Cross-entropy evaluated directly on probabilities.
pub fn cross_entropy_probs(p: &ProbBatch, labels: &[usize]) -> Result<f64> {
    let t = p.probs();
    if labels.len() != t.rows() {
        return Err(Error::contract("cross_entropy", "one label per row required"));
    }
    let k = t.cols();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {y} out of range for {k} classes"),
            ));
        }
        total -= libm::log(t.at(j, y));
    }
    Ok(total / labels.len() as f64)
}

/// Entropy evaluated directly on probabilities, with `0·log 0 = 0`.
pub fn entropy_probs(p: &ProbBatch) -> f64 {
    let t = p.probs();
    let total: f64 = t.data().iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum();
    -total / t.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let p = ProbBatch::new(Tensor::from_rows(&[[1.0 - 1e-12, 1e-12]])).unwrap();
        assert!(cross_entropy_probs(&p, &[0]).unwrap() <= 1e-11);
    }

    #[test]
    fn uniform_k10() {
        let p = ProbBatch::new(Tensor::full(&[3, 10], 0.1)).unwrap();
        let ce = cross_entropy_probs(&p, &[0, 4, 9]).unwrap();
        assert!((ce - libm::log(10.0)).abs() < 1e-12);
        assert!((entropy_probs(&p) - libm::log(10.0)).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn entropy_values() {
        let onehot = ProbBatch::new(Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(entropy_probs(&onehot), 0.0);
        let u2 = ProbBatch::new(Tensor::full(&[1, 2], 0.5)).unwrap();
        assert!((entropy_probs(&u2) - 0.693147).abs() < 1e-6);
        let p = ProbBatch::new(Tensor::from_rows(&[[0.75, 0.25]])).unwrap();
        assert!((entropy_probs(&p) - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn mixed_batch_matches_per_sample_mean() {
        let logits = Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.0, 1.0, -0.5], [-2.0, 0.1, 0.4]]);
        let labels = [2, 0, 1];
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let ce = cross_entropy(&mut tape, lv, &labels).unwrap();
        let ce = tape.value(ce).item();
        let mut brute = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let row = logits.row(j);
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            brute += -libm::log(libm::exp(row[y]) / z);
        }
        assert!((ce - brute / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_probs() {
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(cross_entropy(&mut tape, lv, &[3]).is_err());
        assert!(ProbBatch::new(Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap()).is_err());
    }
}
