use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{LayerParams, Scalar};

/// He initialization: conv and linear weights ~ N(0, sqrt(2 / fan_in)),
/// biases 0, γ = 1, β = 0. Layers are filled in order from one stream.
pub fn he_init<T: Scalar>(layers: &mut [LayerParams<T>], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in layers {
        let fan_in = p.fan_in();
        if fan_in > 0 {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in &mut p.weights {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        }
        p.bias.iter_mut().for_each(|b| *b = T::zero());
        p.bn_gamma.iter_mut().for_each(|g| *g = T::one());
        p.bn_beta.iter_mut().for_each(|b| *b = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_std_follows_fan_in() {
        let mut layers = vec![LayerParams::<f64>::conv3x3(32, 64)];
        he_init(&mut layers, 3);
        let w = &layers[0].weights;
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 288.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.05, "std {std} vs {target}");
        assert!(layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let make = |seed| {
            let mut l = vec![LayerParams::<f32>::conv1x1(4, 4), LayerParams::batchnorm(4)];
            he_init(&mut l, seed);
            l
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1)[0].weights, make(2)[0].weights);
        assert!(make(1)[1].bn_gamma.iter().all(|&g| g == 1.0));
    }
}
