//! Softmax cross-entropy, the symmetric dropout-twice KL divergence, and the
//! aggregated R-Drop objective. Tape builders return scalar loss nodes; the
//! `*_value` functions evaluate the same quantities without a tape.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape, PROB_FLOOR};
use crate::error::{Result, RoseError};
use crate::tensor::{self, Tensor};

/// Which forward pass supplies the SCE gradient in plain ROSE mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceSource {
    /// The first dropout pass (pass index 0).
    #[default]
    Pass0,
    /// An additional forward pass with dropout disabled.
    CleanPass,
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn sce_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather(ls, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Batch mean of `KL(p||q) + KL(q||p)` where `p`, `q` are the softmax of the
/// two logit nodes.
pub fn sym_kl_loss(tape: &mut Tape, logits_p: NodeId, logits_q: NodeId) -> Result<NodeId> {
    let lp = tape.log_softmax(logits_p)?;
    let lq = tape.log_softmax(logits_q)?;
    tape.sym_kl(lp, lq)
}

/// `0.5 * (sce0 + sce1) + weight * kl`.
pub fn rdrop_loss(
    tape: &mut Tape,
    sce0: NodeId,
    sce1: NodeId,
    kl: NodeId,
    weight: f64,
) -> Result<NodeId> {
    if weight < 0.0 || !weight.is_finite() {
        return Err(RoseError::config(format!(
            "consistency weight must be finite and non-negative, got {weight}"
        )));
    }
    let both = tape.add(sce0, sce1)?;
    let mean = tape.scale(both, 0.5);
    let reg = tape.scale(kl, weight);
    tape.add(mean, reg)
}

pub fn sce_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2("sce")?;
    if labels.len() != n {
        return Err(RoseError::shape(
            "sce",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(RoseError::data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let ls = tensor::log_softmax_rows(logits)?;
    let total: f64 = labels.iter().enumerate().map(|(r, &l)| ls.row(r)[l]).sum();
    Ok(-total / n as f64)
}

/// A batch of categorical distributions, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist {
    probs: Tensor,
}

impl ProbDist {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (n, _) = probs.dims2("prob_dist")?;
        for r in 0..n {
            let row = probs.row(r);
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(RoseError::data(format!(
                    "row {r} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(RoseError::data(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(ProbDist { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn softmax(logits: &Tensor) -> Result<Self> {
        let probs = tensor::log_softmax_rows(logits)?.map(f64::exp);
        Ok(ProbDist { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// Batch mean of `KL(p||q) + KL(q||p)` with probabilities floored at
/// `PROB_FLOOR` inside the logarithms.
pub fn sym_kl_value(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if !p.probs.same_shape(&q.probs) {
        return Err(RoseError::shape(
            "sym_kl",
            format!("{:?} vs {:?}", p.probs.shape(), q.probs.shape()),
        ));
    }
    let n = p.probs.shape()[0] as f64;
    let total: f64 = p
        .probs
        .data()
        .iter()
        .zip(q.probs.data())
        .map(|(&a, &b)| (a - b) * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_and_uniform_sce() {
        let logits = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        assert!(sce_value(&logits, &[0]).unwrap().abs() < 1e-300);
        let uniform = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        for label in 0..2 {
            assert!(
                (sce_value(&uniform, &[label]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15
            );
        }
    }

    #[test]
    fn sce_rejects_bad_labels() {
        let logits = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(sce_value(&logits, &[2]).is_err());
        let mut tape = Tape::new();
        let z = tape.input(logits);
        assert!(sce_loss(&mut tape, z, &[5]).is_err());
    }

    #[test]
    fn tape_sce_matches_value() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5]]).unwrap();
        let mut tape = Tape::new();
        let z = tape.input(logits.clone());
        let l = sce_loss(&mut tape, z, &[2, 0]).unwrap();
        assert_eq!(
            tape.value(l).data()[0],
            sce_value(&logits, &[2, 0]).unwrap()
        );
    }

    #[test]
    fn sym_kl_identity_and_symmetry() {
        let p = ProbDist::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = ProbDist::from_rows(&[vec![0.9, 0.1]]).unwrap();
        assert_eq!(sym_kl_value(&p, &p).unwrap(), 0.0);
        assert_eq!(sym_kl_value(&p, &q).unwrap(), sym_kl_value(&q, &p).unwrap());
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = ProbDist::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = ProbDist::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let v = sym_kl_value(&p, &q).unwrap();
        assert!(v.is_finite() && v > 0.0);
        assert!((v - 2.0 * (1e12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::from_rows(&[vec![0.6, 0.6]]).is_err());
        assert!(ProbDist::from_rows(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn rdrop_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(1.0));
        let b = tape.input(Tensor::scalar(1.0));
        let k = tape.input(Tensor::scalar(0.5));
        let l = rdrop_loss(&mut tape, a, b, k, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.5);
        let l0 = rdrop_loss(&mut tape, a, b, k, 0.0).unwrap();
        assert_eq!(tape.value(l0).data()[0], 1.0);
        assert!(rdrop_loss(&mut tape, a, b, k, -1.0).is_err());
    }
}
