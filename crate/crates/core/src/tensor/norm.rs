use super::{GradBundle, LayerGrads, LayerKind, LayerParams, Mode, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel statistics used by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check<T: Scalar>(input: &Tensor<T>, p: &LayerParams<T>) -> Result<()> {
    if p.kind != LayerKind::BatchNorm {
        return Err(Error::InvalidArgument(format!(
            "batchnorm called with a {:?} layer",
            p.kind
        )));
    }
    p.output_shape(input.shape()).map(|_| ())
}

/// Normalize each channel over (N, H, W) and apply γ, β.
///
/// Train mode uses the batch statistics and folds them into the running
/// averages; eval mode uses the running averages unchanged.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    p: &mut LayerParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    check(input, p)?;
    let s = input.shape();
    let plane = s.plane();
    let count = s.n * plane;
    let eps = T::from_f64(BN_EPSILON);
    let x = input.data();

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            if count > 0 {
                let inv_count = T::one() / T::from_usize(count);
                for (c, m) in mean.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        acc = x[base..base + plane].iter().fold(acc, |a, &v| a + v);
                    }
                    *m = acc * inv_count;
                }
                for (c, v) in var.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        acc = x[base..base + plane].iter().fold(acc, |a, &val| {
                            let d = val - mean[c];
                            a + d * d
                        });
                    }
                    *v = acc * inv_count;
                }
                let momentum = T::from_f64(BN_MOMENTUM);
                let unbias = if count > 1 {
                    T::from_usize(count) / T::from_usize(count - 1)
                } else {
                    T::one()
                };
                for c in 0..s.c {
                    p.bn_running_mean[c] =
                        momentum * p.bn_running_mean[c] + (T::one() - momentum) * mean[c];
                    p.bn_running_var[c] =
                        momentum * p.bn_running_var[c] + (T::one() - momentum) * var[c] * unbias;
                }
            }
            (mean, var)
        }
        Mode::Eval => (p.bn_running_mean.clone(), p.bn_running_var.clone()),
    };

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v.max(T::zero()) + eps).sqrt())
        .collect();
    let mut out = Tensor::zeros(s);
    let y = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let scale = p.bn_gamma[c] * inv_std[c];
            let shift = p.bn_beta[c] - mean[c] * scale;
            for i in base..base + plane {
                y[i] = x[i] * scale + shift;
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode,
            mean,
            inv_std,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &LayerParams<T>,
    cache: &BnCache<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    check(input, p)?;
    input.check_same_shape(upstream, "batchnorm backward")?;
    let s = input.shape();
    let plane = s.plane();
    let count = s.n * plane;
    let x = input.data();
    let dy = upstream.data();
    let mut grads = LayerGrads::zeros_like(p);
    let mut d_input = Tensor::zeros(s);

    for c in 0..s.c {
        let (mu, inv) = (cache.mean[c], cache.inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * (x[i] - mu) * inv;
            }
        }
        grads.bn_beta[c] = sum_dy;
        grads.bn_gamma[c] = sum_dy_xhat;

        let gamma = p.bn_gamma[c];
        let dx = d_input.data_mut();
        match cache.mode {
            Mode::Eval => {
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        dx[i] = dy[i] * gamma * inv;
                    }
                }
            }
            Mode::Train => {
                let m = T::from_usize(count.max(1));
                let k = gamma * inv / m;
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        let xhat = (x[i] - mu) * inv;
                        dx[i] = k * (m * dy[i] - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
        }
    }
    Ok(GradBundle {
        d_input,
        d_params: grads,
    })
}
