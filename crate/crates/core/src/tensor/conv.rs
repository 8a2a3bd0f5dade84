use rayon::prelude::*;

use super::{matmul, GradBundle, LayerGrads, LayerParams, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Images per parallel work item. Fixed so the weight-gradient reduction
/// order never depends on the thread count.
const CHUNK: usize = 4;

struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Identity lowering: the sample itself is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.cols();
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        dx.iter_mut().for_each(|v| *v = T::zero());
        let plane = self.cols();
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dx[base + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(input: Shape, p: &LayerParams<T>) -> Result<(Shape, Geometry)> {
    if !p.kind.is_conv() {
        return Err(Error::InvalidArgument(format!(
            "conv2d called with a {:?} layer",
            p.kind
        )));
    }
    let out = p.output_shape(input)?;
    let g = Geometry {
        in_c: input.c,
        in_h: input.h,
        in_w: input.w,
        out_h: out.h,
        out_w: out.w,
        k: p.kind.kernel(),
        stride: p.stride,
        pad: p.padding,
    };
    Ok((out, g))
}

/// Cross-correlation of `input` with the layer's kernels, plus bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    let (out_shape, g) = geometry(input.shape(), p)?;
    let mut out = Tensor::zeros(out_shape);
    let (rows, cols) = (g.rows(), g.cols());
    let in_sample = input.shape().sample();
    let out_sample = out_shape.sample();
    let o = p.out_channels;
    if out.is_empty() || input.is_empty() {
        return Ok(out);
    }

    out.data_mut()
        .par_chunks_mut(out_sample * CHUNK)
        .enumerate()
        .for_each(|(chunk, out_block)| {
            let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            for (i, y) in out_block.chunks_mut(out_sample).enumerate() {
                let n = chunk * CHUNK + i;
                let x = &input.data()[n * in_sample..(n + 1) * in_sample];
                let lowered: &[T] = if g.is_pointwise() {
                    x
                } else {
                    g.im2col(x, &mut buf);
                    &buf
                };
                for (oc, row) in y.chunks_mut(cols).enumerate() {
                    row.iter_mut().for_each(|v| *v = p.bias[oc]);
                }
                matmul(o, rows, cols, &p.weights, false, lowered, false, y, true);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &LayerParams<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let (out_shape, g) = geometry(input.shape(), p)?;
    if upstream.shape() != out_shape {
        return Err(Error::Shape(format!(
            "conv2d backward: upstream {} but forward output is {out_shape}",
            upstream.shape()
        )));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let o = p.out_channels;
    let in_sample = input.shape().sample();
    let out_sample = out_shape.sample();
    let mut d_input = Tensor::zeros(input.shape());
    if d_input.is_empty() || upstream.is_empty() {
        return Ok(GradBundle {
            d_input,
            d_params: LayerGrads::zeros_like(p),
        });
    }

    let partials: Vec<(Vec<T>, Vec<T>)> = d_input
        .data_mut()
        .par_chunks_mut(in_sample * CHUNK)
        .enumerate()
        .map(|(chunk, dx_block)| {
            let mut dw = vec![T::zero(); p.weights.len()];
            let mut db = vec![T::zero(); o];
            let mut lowered = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            let mut d_lowered = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            for (i, dx) in dx_block.chunks_mut(in_sample).enumerate() {
                let n = chunk * CHUNK + i;
                let x = &input.data()[n * in_sample..(n + 1) * in_sample];
                let dy = &upstream.data()[n * out_sample..(n + 1) * out_sample];
                for (oc, row) in dy.chunks(cols).enumerate() {
                    db[oc] += row.iter().fold(T::zero(), |a, &v| a + v);
                }
                if g.is_pointwise() {
                    matmul(o, cols, rows, dy, false, x, true, &mut dw, true);
                    matmul(rows, o, cols, &p.weights, true, dy, false, dx, false);
                } else {
                    g.im2col(x, &mut lowered);
                    matmul(o, cols, rows, dy, false, &lowered, true, &mut dw, true);
                    matmul(rows, o, cols, &p.weights, true, dy, false, &mut d_lowered, false);
                    g.col2im(&d_lowered, dx);
                }
            }
            (dw, db)
        })
        .collect();

    let mut grads = LayerGrads::zeros_like(p);
    for (dw, db) in &partials {
        for (a, &b) in grads.weights.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, &b) in grads.bias.iter_mut().zip(db) {
            *a += b;
        }
    }
    Ok(GradBundle {
        d_input,
        d_params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, p: &LayerParams<f64>) -> Tensor<f64> {
        let s = x.shape();
        let k = p.kind.kernel();
        let pad = p.padding as isize;
        let oh = (s.h + 2 * p.padding - k) / p.stride + 1;
        let ow = (s.w + 2 * p.padding - k) / p.stride + 1;
        Tensor::from_fn(Shape::new(s.n, p.out_channels, oh, ow), |n, o, y, xx| {
            let mut acc = p.bias[o];
            for c in 0..s.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * p.stride + ky) as isize - pad;
                        let ix = (xx * p.stride + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += p.weights[((o * s.c + c) * k + ky) * k + kx]
                                * x.at(n, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv3x3_on_catalog_input_preserves_spatial_extent() {
        let x = Tensor::<f32>::zeros(Shape::new(100, 3, 32, 32));
        let p = LayerParams::<f32>::conv3x3(3, 32);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), Shape::new(100, 32, 32, 32));
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape::new(2, 1, 5, 6), &mut rng);
        let mut p = LayerParams::<f64>::conv3x3(1, 1);
        p.weights[4] = 1.0;
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        for mut p in [LayerParams::conv3x3(2, 3), LayerParams::conv1x1(2, 3)] {
            p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let got = conv2d(&x, &p).unwrap();
            let want = naive_conv(&x, &p);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
        }
    }

    #[test]
    fn strided_convolution_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(Shape::new(5, 2, 7, 6), &mut rng);
        let mut p = LayerParams::conv3x3(2, 4);
        p.stride = 2;
        p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let got = conv2d(&x, &p).unwrap();
        let want = naive_conv(&x, &p);
        assert_eq!(got.shape(), Shape::new(5, 4, 4, 3));
        assert!(got.max_abs_diff(&want).unwrap() < 1e-9);
    }

    #[test]
    fn channel_mismatch_names_the_dimension() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 4, 4));
        let p = LayerParams::<f64>::conv3x3(3, 2);
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("input channels 4"), "{err}");
    }
}
