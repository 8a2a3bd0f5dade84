use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::tensor::{Shape, Tensor};

/// 32×32 colour images of one Gaussian blob per class.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, difficulty: f64) -> Dataset {
    synthetic_dataset_sized(seed, n, classes, difficulty, 32)
}

/// Class-conditional blob images of a chosen side length.
///
/// Class c has a blob of fixed centre, width and colour on a grey
/// background. At difficulty 0 all images of a class are identical; larger
/// difficulties jitter the blob centre and add pixel noise. Labels cycle
/// through the classes, so every class gets ⌊n/classes⌋ or one more sample.
pub fn synthetic_dataset_sized(
    seed: u64,
    n: usize,
    classes: usize,
    difficulty: f64,
    side: usize,
) -> Dataset {
    let classes = classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let protos: Vec<([f64; 2], f64, [f64; 3])> = (0..classes)
        .map(|_| {
            let centre = [rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s)];
            let width = rng.random_range(0.08 * s..0.25 * s);
            let colour = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            (centre, width, colour)
        })
        .collect();
    let jitter = Normal::new(0.0, (difficulty * 0.1 * s).max(0.0) + f64::MIN_POSITIVE).expect("std");
    let noise = Normal::new(0.0, (difficulty * 40.0).max(0.0) + f64::MIN_POSITIVE).expect("std");
    let plane = side * side;
    let mut pixels = vec![0f32; n * 3 * plane];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &label) in labels.iter().enumerate() {
        let (centre, width, colour) = protos[label];
        let (dy, dx) = if difficulty > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let r2 = (y as f64 - centre[0] - dy).powi(2) + (x as f64 - centre[1] - dx).powi(2);
                    let blob = (-r2 / (2.0 * width * width)).exp();
                    let mut v = 128.0 + 120.0 * colour[c] * blob;
                    if difficulty > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    pixels[(i * 3 + c) * plane + y * side + x] = v.clamp(0.0, 255.0) as f32;
                }
            }
        }
    }
    Dataset {
        images: Tensor::from_vec(Shape::new(n, 3, side, side), pixels).expect("sized"),
        labels,
        coarse_labels: None,
        num_classes: classes,
        split: Split::Train,
    }
}
