use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Rule combining the K member outputs at a fusion stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Sum,
    Max,
    Concat,
    /// Elementwise mean; used to average member probabilities in decision fusion.
    Average,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Max => "max",
            FusionKind::Concat => "concat",
            FusionKind::Average => "average",
        }
    }

    /// Whether members must produce identically shaped outputs.
    pub fn needs_equal_shapes(self) -> bool {
        !matches!(self, FusionKind::Concat)
    }
}

/// What the backward pass of a fusion needs from its forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum FuseCache {
    Sum { k: usize },
    Average { k: usize },
    /// Index of the winning input per element.
    Max { k: usize, winners: Vec<u16> },
    /// Channel count of each input, in order.
    Concat { channels: Vec<usize> },
}

/// Combine `inputs` with the chosen rule. `stage` is only used in diagnostics.
///
/// Sums accumulate in ascending input order; max ties go to the lowest index.
pub fn elementwise_fuse<T: Scalar>(
    kind: FusionKind,
    inputs: &[&Tensor<T>],
    stage: usize,
) -> Result<(Tensor<T>, FuseCache)> {
    let first = inputs.first().ok_or_else(|| {
        Error::Shape(format!("fusion at stage {stage}: no inputs to fuse"))
    })?;
    let base = first.shape();
    for (k, t) in inputs.iter().enumerate().skip(1) {
        let s = t.shape();
        let ok = if kind.needs_equal_shapes() {
            s == base
        } else {
            s.n == base.n && s.h == base.h && s.w == base.w
        };
        if !ok {
            return Err(Error::Shape(format!(
                "{} fusion at stage {stage}: input {k} has shape {s}, input 0 has {base}",
                kind.as_str()
            )));
        }
    }
    let k = inputs.len();
    match kind {
        FusionKind::Sum | FusionKind::Average => {
            let mut out = (*first).clone();
            for t in &inputs[1..] {
                out.add_assign(t)?;
            }
            if kind == FusionKind::Average {
                let inv = T::one() / T::from_usize(k);
                out.data_mut().iter_mut().for_each(|v| *v *= inv);
                Ok((out, FuseCache::Average { k }))
            } else {
                Ok((out, FuseCache::Sum { k }))
            }
        }
        FusionKind::Max => {
            let mut out = (*first).clone();
            let mut winners = vec![0u16; out.len()];
            for (idx, t) in inputs.iter().enumerate().skip(1) {
                for ((o, w), &v) in out.data_mut().iter_mut().zip(&mut winners).zip(t.data()) {
                    if v > *o {
                        *o = v;
                        *w = idx as u16;
                    }
                }
            }
            Ok((out, FuseCache::Max { k, winners }))
        }
        FusionKind::Concat => {
            let channels: Vec<usize> = inputs.iter().map(|t| t.shape().c).collect();
            let total: usize = channels.iter().sum();
            let out_shape = Shape::new(base.n, total, base.h, base.w);
            let mut data = Vec::with_capacity(out_shape.len());
            for n in 0..base.n {
                for t in inputs {
                    data.extend_from_slice(t.sample(n));
                }
            }
            Ok((Tensor::from_vec(out_shape, data)?, FuseCache::Concat { channels }))
        }
    }
}

/// Split the upstream gradient of a fusion back onto its inputs.
pub fn fuse_backward<T: Scalar>(cache: &FuseCache, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    match cache {
        FuseCache::Sum { k } => Ok(vec![upstream.clone(); *k]),
        FuseCache::Average { k } => Ok(vec![upstream.scale(T::one() / T::from_usize(*k)); *k]),
        FuseCache::Max { k, winners } => {
            if winners.len() != upstream.len() {
                return Err(Error::Shape("max fusion backward: mask size mismatch".into()));
            }
            let mut grads = vec![Tensor::zeros(upstream.shape()); *k];
            for (i, (&w, &g)) in winners.iter().zip(upstream.data()).enumerate() {
                grads[w as usize].data_mut()[i] = g;
            }
            Ok(grads)
        }
        FuseCache::Concat { channels } => {
            let s = upstream.shape();
            if channels.iter().sum::<usize>() != s.c {
                return Err(Error::Shape(format!(
                    "concat backward: upstream has {} channels, inputs had {}",
                    s.c,
                    channels.iter().sum::<usize>()
                )));
            }
            let plane = s.plane();
            let mut grads: Vec<Vec<T>> = channels
                .iter()
                .map(|&c| Vec::with_capacity(s.n * c * plane))
                .collect();
            for n in 0..s.n {
                let mut offset = 0;
                let sample = upstream.sample(n);
                for (g, &c) in grads.iter_mut().zip(channels) {
                    g.extend_from_slice(&sample[offset * plane..(offset + c) * plane]);
                    offset += c;
                }
            }
            grads
                .into_iter()
                .zip(channels)
                .map(|(g, &c)| Tensor::from_vec(s.with_c(c), g))
                .collect()
        }
    }
}
