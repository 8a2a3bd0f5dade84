use crate::error::{Error, Result};
use crate::tensor::{LayerGrads, LayerParams, Scalar};

/// Hyperparameters of one SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Zeroed velocity buffers mirroring the layout of `layers`.
pub fn zero_velocity<T: Scalar>(layers: &[LayerParams<T>]) -> Vec<LayerGrads<T>> {
    layers.iter().map(LayerGrads::zeros_like).collect()
}

fn update<T: Scalar>(w: &mut [T], v: &mut [T], g: &[T], s: SgdStep, decay: bool) {
    let lr = T::from_f64(s.lr);
    let mu = T::from_f64(s.momentum);
    let wd = T::from_f64(if decay { s.weight_decay } else { 0.0 });
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v - lr * (g + wd * *w);
        *w += *v;
    }
}

/// v ← μv − lr·(g + λw); w ← w + v. Decay applies to weights only, not to
/// biases, γ or β. Nothing is changed if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    layers: &mut [LayerParams<T>],
    velocity: &mut [LayerGrads<T>],
    grads: &[LayerGrads<T>],
    step: SgdStep,
    step_index: usize,
) -> Result<()> {
    if layers.len() != velocity.len() || layers.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} layers, {} velocity buffers, {} gradients",
            layers.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for (id, ((p, v), g)) in layers.iter().zip(velocity.iter()).zip(grads).enumerate() {
        let sizes = |a: usize, b: usize, c: usize| a == b && b == c;
        if !(sizes(p.weights.len(), v.weights.len(), g.weights.len())
            && sizes(p.bias.len(), v.bias.len(), g.bias.len())
            && sizes(p.bn_gamma.len(), v.bn_gamma.len(), g.bn_gamma.len())
            && sizes(p.bn_beta.len(), v.bn_beta.len(), g.bn_beta.len()))
        {
            return Err(Error::Shape(format!("layer {id}: parameter, velocity and gradient layouts differ")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                step: step_index,
                what: format!("gradient of layer {id}"),
            });
        }
    }
    for ((p, v), g) in layers.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        update(&mut p.weights, &mut v.weights, &g.weights, step, true);
        update(&mut p.bias, &mut v.bias, &g.bias, step, false);
        update(&mut p.bn_gamma, &mut v.bn_gamma, &g.bn_gamma, step, false);
        update(&mut p.bn_beta, &mut v.bn_beta, &g.bn_beta, step, false);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: f64, b: f64) -> Vec<LayerParams<f64>> {
        let mut p = LayerParams::linear(1, 1);
        p.weights[0] = w;
        p.bias[0] = b;
        vec![p]
    }

    fn grad(gw: f64, gb: f64) -> Vec<LayerGrads<f64>> {
        vec![LayerGrads {
            weights: vec![gw],
            bias: vec![gb],
            bn_gamma: vec![],
            bn_beta: vec![],
        }]
    }

    const STEP: SgdStep = SgdStep { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut l = layer(0.7, -0.2);
        let mut v = zero_velocity(&l);
        let s = SgdStep { weight_decay: 0.0, ..STEP };
        sgd_step(&mut l, &mut v, &grad(0.0, 0.0), s, 0).unwrap();
        assert_eq!(l, layer(0.7, -0.2));
    }

    #[test]
    fn first_step_closed_form_and_bias_not_decayed() {
        let mut l = layer(2.0, 3.0);
        let mut v = zero_velocity(&l);
        sgd_step(&mut l, &mut v, &grad(0.5, 0.5), STEP, 0).unwrap();
        assert!((l[0].weights[0] - (2.0 - 0.1 * (0.5 + 0.01 * 2.0))).abs() < 1e-15);
        assert!((l[0].bias[0] - (3.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut l = layer(1.0, 0.0);
        let mut v = zero_velocity(&l);
        let s = SgdStep { weight_decay: 0.0, ..STEP };
        // scalar oracle of the same recursion
        let (mut w, mut vel) = (1.0f64, 0.0f64);
        for i in 0..100 {
            let g = l[0].weights[0];
            sgd_step(&mut l, &mut v, &grad(g, 0.0), s, i).unwrap();
            vel = 0.9 * vel - 0.1 * w;
            w += vel;
            assert!((l[0].weights[0] - w).abs() < 1e-12);
        }
        assert!(w.abs() < 0.05, "{w}");
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut l = layer(1.0, 1.0);
        let mut v = zero_velocity(&l);
        let err = sgd_step(&mut l, &mut v, &grad(f64::NAN, 0.0), STEP, 17).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 17, .. }));
        assert_eq!(l, layer(1.0, 1.0));
        assert!(sgd_step(&mut l, &mut v, &[], STEP, 0).is_err());
    }
}
