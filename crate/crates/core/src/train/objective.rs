use super::TrainMode;
use crate::error::Result;
use crate::fusenet::{decision_joint_loss, decision_probabilities, FusedNet};
use crate::tensor::{softmax_xent, Mode, Scalar, Tensor};

/// Loss of one batch, the seeds of its backward pass, and the scores on
/// which predictions are made.
pub struct Objective<T> {
    pub loss: T,
    pub d_scores: Vec<Tensor<T>>,
    pub d_aux: Vec<Tensor<T>>,
    /// Class scores (or fused probabilities for decision modes).
    pub predictions: Tensor<T>,
}

/// Forward `x0` in the topology of `mode` and evaluate its training loss.
pub fn objective<T: Scalar>(
    net: &mut FusedNet<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    mode: TrainMode,
    aux_weight: f64,
    bn_mode: Mode,
) -> Result<Objective<T>> {
    let out = net.forward(x0, mode.topology(), bn_mode)?;
    match mode {
        TrainMode::DecisionJoint => {
            let (loss, d_scores) = decision_joint_loss(&out.scores, labels)?;
            Ok(Objective {
                loss,
                d_scores,
                d_aux: Vec::new(),
                predictions: decision_probabilities(&out.scores)?,
            })
        }
        TrainMode::DecisionSeparate => {
            let mut loss = T::zero();
            let mut d_scores = Vec::with_capacity(out.scores.len());
            for s in &out.scores {
                let (l, g) = softmax_xent(s, labels)?;
                loss += l;
                d_scores.push(g);
            }
            Ok(Objective {
                loss,
                d_scores,
                d_aux: Vec::new(),
                predictions: decision_probabilities(&out.scores)?,
            })
        }
        _ => {
            let (mut loss, d) = softmax_xent(out.main(), labels)?;
            let w = T::from_f64(aux_weight);
            let mut d_aux = Vec::with_capacity(out.aux.len());
            for a in &out.aux {
                let (l, g) = softmax_xent(a, labels)?;
                loss += w * l;
                d_aux.push(g.scale(w));
            }
            Ok(Objective {
                loss,
                d_scores: vec![d],
                d_aux,
                predictions: out.scores.into_iter().next().expect("one head"),
            })
        }
    }
}

/// Index of the largest score in each row.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape().c.max(1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Number of rows whose top-1 prediction differs from the label.
pub fn count_errors<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(scores)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count()
}
