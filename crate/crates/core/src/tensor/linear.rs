use super::{matmul, GradBundle, LayerGrads, LayerKind, LayerParams, Scalar, Tensor};
use crate::error::{Error, Result};

fn check<T: Scalar>(input: &Tensor<T>, p: &LayerParams<T>) -> Result<()> {
    if p.kind != LayerKind::Linear {
        return Err(Error::InvalidArgument(format!(
            "linear_classifier called with a {:?} layer",
            p.kind
        )));
    }
    p.output_shape(input.shape()).map(|_| ())
}

/// `scores = weight · features + bias` for globally pooled features.
pub fn linear_classifier<T: Scalar>(input: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    check(input, p)?;
    let out_shape = p.output_shape(input.shape())?;
    let (n, i, o) = (out_shape.n, p.in_channels, p.out_channels);
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(&p.bias);
    }
    // (n × i) · (o × i)ᵀ
    matmul(n, i, o, input.data(), false, &p.weights, true, &mut out, true);
    Tensor::from_vec(out_shape, out)
}

pub fn linear_classifier_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &LayerParams<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    check(input, p)?;
    let out_shape = p.output_shape(input.shape())?;
    if upstream.shape() != out_shape {
        return Err(Error::Shape(format!(
            "linear backward: upstream {} but forward output is {out_shape}",
            upstream.shape()
        )));
    }
    let (n, i, o) = (out_shape.n, p.in_channels, p.out_channels);
    let mut grads = LayerGrads::zeros_like(p);
    let dy = upstream.data();
    // dW = dyᵀ · x  (o × n)·(n × i)
    matmul(o, n, i, dy, true, input.data(), false, &mut grads.weights, false);
    for row in dy.chunks(o.max(1)).take(n) {
        for (b, &g) in grads.bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); n * i];
    matmul(n, o, i, dy, false, &p.weights, false, &mut dx, false);
    Ok(GradBundle {
        d_input: Tensor::from_vec(input.shape(), dx)?,
        d_params: grads,
    })
}
