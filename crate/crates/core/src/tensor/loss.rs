use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax over the channel axis of (N, classes, 1, 1) scores.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let k = scores.shape().c.max(1);
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean cross-entropy of softmax(scores) against `labels`, and its gradient
/// with respect to the scores.
pub fn softmax_xent<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = scores.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Shape(format!("scores must be (N, classes, 1, 1), got {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= s.c {
            return Err(Error::Label {
                index,
                label,
                classes: s.c,
            });
        }
    }
    let k = s.c;
    let inv_n = T::one() / T::from_usize(s.n.max(1));
    let mut grad = Tensor::zeros(s);
    let mut loss = T::zero();
    for (n, (&label, row)) in labels.iter().zip(scores.data().chunks(k)).enumerate() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}
