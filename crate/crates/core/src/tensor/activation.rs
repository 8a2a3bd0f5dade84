use super::{Scalar, Tensor};
use crate::error::Result;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.check_same_shape(upstream, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}
