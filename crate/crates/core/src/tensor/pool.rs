use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Winner position (0..4, row-major within the 2×2 window) per output cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMask {
    winners: Vec<u8>,
}

impl PoolMask {
    pub fn winners(&self) -> &[u8] {
        &self.winners
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first window position.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolMask)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "maxpool2: height {} and width {} must both be even",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut winners = Vec::with_capacity(out_shape.len());
    let x = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let top = base + 2 * oy * s.w + 2 * ox;
                let window = [x[top], x[top + 1], x[top + s.w], x[top + s.w + 1]];
                let mut best = 0;
                for (i, &v) in window.iter().enumerate().skip(1) {
                    if v > window[best] {
                        best = i;
                    }
                }
                out.push(window[best]);
                winners.push(best as u8);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, PoolMask { winners }))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: Shape,
    mask: &PoolMask,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = Shape::new(input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2);
    if upstream.shape() != out_shape || mask.winners.len() != out_shape.len() {
        return Err(Error::Shape(format!(
            "maxpool2 backward: upstream {} does not match pooled shape {out_shape}",
            upstream.shape()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let w = input_shape.w;
    let dy = upstream.data();
    let d = dx.data_mut();
    let mut cell = 0;
    for plane in 0..input_shape.n * input_shape.c {
        let base = plane * input_shape.h * w;
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let top = base + 2 * oy * w + 2 * ox;
                let offset = match mask.winners[cell] {
                    0 => 0,
                    1 => 1,
                    2 => w,
                    _ => w + 1,
                };
                d[top + offset] += dy[cell];
                cell += 1;
            }
        }
    }
    Ok(dx)
}

/// Mean over each (h, w) plane.
pub fn avgpool_global<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let scale = T::one() / T::from_usize(plane.max(1));
    let data = input
        .data()
        .chunks(plane.max(1))
        .take(s.n * s.c)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * scale)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled length")
}

pub fn avgpool_global_backward<T: Scalar>(
    input_shape: Shape,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let want = Shape::new(input_shape.n, input_shape.c, 1, 1);
    if upstream.shape() != want {
        return Err(Error::Shape(format!(
            "avgpool backward: upstream {} but expected {want}",
            upstream.shape()
        )));
    }
    let plane = input_shape.plane();
    let scale = T::one() / T::from_usize(plane.max(1));
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in upstream.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::from_vec(input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_catalog_extent() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 3, 32, 32));
        let (y, _) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 16, 16));
    }

    #[test]
    fn window_maximum() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, mask) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(mask.winners(), &[3]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::filled(Shape::new(1, 2, 4, 6), 2.5f64);
        let (y, mask) = maxpool2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert!(mask.winners().iter().all(|&w| w == 0));
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4));
        assert!(maxpool2(&x).is_err());
    }

    #[test]
    fn backward_routes_to_winner() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 5.0, 3.0, 4.0]).unwrap();
        let (_, mask) = maxpool2(&x).unwrap();
        let dy = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        let dx = maxpool2_backward(x.shape(), &mask, &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn global_average_of_constants_and_delta() {
        let x = Tensor::filled(Shape::new(1, 1, 8, 8), 5.0f64);
        assert_eq!(avgpool_global(&x).data(), &[5.0]);
        let mut d = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        d.set(0, 0, 3, 6, 1.0);
        assert_eq!(avgpool_global(&d).data(), &[1.0 / 64.0]);
    }

    #[test]
    fn global_average_matches_direct_sum() {
        let x = Tensor::from_fn(Shape::new(2, 3, 8, 8), |n, c, h, w| {
            ((n * 7 + c * 3 + h * 5 + w) as f64 * 0.73).sin()
        });
        let y = avgpool_global(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in 0..8 {
                    for w in 0..8 {
                        s += x.at(n, c, h, w);
                    }
                }
                assert!((y.at(n, c, 0, 0) - s / 64.0).abs() < 1e-12);
            }
        }
    }
}
