use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const GCN_EPSILON: f64 = 1e-8;

/// Per image: subtract the mean over all values, divide by max(std, ε).
pub fn global_contrast_normalize<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    let mut out = images.clone();
    let n = images.shape().n;
    for i in 0..n {
        let sample = out.sample_mut(i);
        if sample.is_empty() {
            continue;
        }
        let len = sample.len() as f64;
        let mean = sample.iter().map(|v| v.as_f64()).sum::<f64>() / len;
        let var = sample
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / len;
        let denom = var.sqrt().max(GCN_EPSILON);
        for v in sample.iter_mut() {
            *v = T::from_f64((v.as_f64() - mean) / denom);
        }
    }
    out
}

/// Zero padding, random crop and random horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    /// Output extent; `None` keeps the input extent.
    pub crop: Option<usize>,
    pub hflip_prob: f64,
    pub gcn: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad: 4,
            crop: None,
            hflip_prob: 0.5,
            gcn: true,
        }
    }
}

/// A concrete crop: top-left offset into the padded image and flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Pad `src` (C×H×W) by `pad` zeros, cut a `crop`×`crop` window at the given
/// offset, optionally mirror it, and write it to `dst`.
pub fn augment_image<T: Scalar>(
    src: &[T],
    channels: usize,
    side: usize,
    pad: usize,
    crop_side: usize,
    crop: Crop,
    dst: &mut [T],
) {
    for c in 0..channels {
        for y in 0..crop_side {
            let sy = (crop.top + y) as isize - pad as isize;
            for x in 0..crop_side {
                let ox = if crop.flip { crop_side - 1 - x } else { x };
                let sx = (crop.left + ox) as isize - pad as isize;
                let v = if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side {
                    src[(c * side + sy as usize) * side + sx as usize]
                } else {
                    T::zero()
                };
                dst[(c * crop_side + y) * crop_side + x] = v;
            }
        }
    }
}

/// Augment a batch of square images; crops and flips are drawn from `rng`.
pub fn augment<T: Scalar>(images: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor<T> {
    let s = images.shape();
    let side = s.h;
    let crop_side = cfg.crop.unwrap_or(side).min(side + 2 * cfg.pad);
    let span = side + 2 * cfg.pad - crop_side;
    let mut out = Tensor::zeros(crate::tensor::Shape::new(s.n, s.c, crop_side, crop_side));
    for n in 0..s.n {
        let crop = Crop {
            top: rng.random_range(0..=span),
            left: rng.random_range(0..=span),
            flip: rng.random::<f64>() < cfg.hflip_prob,
        };
        let src = images.sample(n).to_vec();
        augment_image(&src, s.c, side, cfg.pad, crop_side, crop, out.sample_mut(n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, _, _, _| rng.random_range(0.0..255.0))
    }

    fn apply(img: &Tensor<f64>, crop: Crop) -> Tensor<f64> {
        let mut out = Tensor::zeros(img.shape());
        augment_image(img.sample(0), 3, 32, 4, 32, crop, out.sample_mut(0));
        out
    }

    #[test]
    fn gcn_standardizes_each_image() {
        let g = global_contrast_normalize(&image(1));
        let mean = g.sum() / g.len() as f64;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64;
        assert!(mean.abs() <= 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        let again = global_contrast_normalize(&g);
        assert!(again.max_abs_diff(&g).unwrap() <= 1e-4);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let g = global_contrast_normalize(&Tensor::filled(Shape::new(1, 3, 4, 4), 7.0f32));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centre_crop_is_identity_and_flip_is_an_involution() {
        let img = image(2);
        let centre = Crop { top: 4, left: 4, flip: false };
        assert_eq!(apply(&img, centre), img);
        let flipped = apply(&img, Crop { flip: true, ..centre });
        assert_ne!(flipped, img);
        assert_eq!(apply(&flipped, Crop { flip: true, ..centre }), img);
    }

    #[test]
    fn corner_crop_has_a_zero_border() {
        let img = image(3).map(|v| v + 1.0);
        let out = apply(&img, Crop { top: 0, left: 0, flip: false });
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out.at(0, c, y, x);
                    if y < 4 || x < 4 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, img.at(0, c, y - 4, x - 4));
                    }
                }
            }
        }
    }

    #[test]
    fn batch_augmentation_is_seeded_and_shape_preserving() {
        let batch = Tensor::from_fn(Shape::new(4, 3, 32, 32), |n, c, h, w| (n + c + h * w) as f32);
        let cfg = AugmentConfig::default();
        let a = augment(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.shape(), batch.shape());
    }

    proptest! {
        #[test]
        fn gcn_ignores_affine_rescaling(a in 0.1f64..20.0, b in -100.0f64..100.0, seed in 0u64..1000) {
            let img = image(seed);
            let lhs = global_contrast_normalize(&img.map(|v| a * v + b));
            let rhs = global_contrast_normalize(&img);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
        }
    }
}
