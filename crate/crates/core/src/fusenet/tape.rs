use crate::error::{Error, Result};
use crate::tensor::{
    avgpool_global, avgpool_global_backward, backward_layer, elementwise_fuse, forward_layer,
    fuse_backward, maxpool2, maxpool2_backward, relu, relu_backward, FuseCache, FusionKind,
    LayerGrads, LayerParams, Mode, OpCache, PoolMask, Scalar, Tensor,
};

pub(crate) type ValueId = usize;

#[derive(Clone, Debug)]
enum Step<T> {
    Input,
    Param {
        layer: usize,
        input: ValueId,
        cache: OpCache<T>,
    },
    Relu {
        input: ValueId,
    },
    Pool {
        input: ValueId,
        mask: PoolMask,
    },
    AvgPool {
        input: ValueId,
    },
    Fuse {
        inputs: Vec<ValueId>,
        cache: FuseCache,
    },
}

/// Values computed by one forward pass, in evaluation order, with what each
/// op needs for its vector-Jacobian product.
#[derive(Clone, Debug)]
pub(crate) struct Tape<T> {
    values: Vec<Tensor<T>>,
    steps: Vec<Step<T>>,
    pub scores: Vec<ValueId>,
    pub aux: Vec<ValueId>,
    pub stages: Vec<ValueId>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(x0: &Tensor<T>) -> Self {
        Tape {
            values: vec![x0.clone()],
            steps: vec![Step::Input],
            scores: Vec::new(),
            aux: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub const INPUT: ValueId = 0;

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor<T>, step: Step<T>) -> ValueId {
        self.values.push(value);
        self.steps.push(step);
        self.values.len() - 1
    }

    pub fn param(
        &mut self,
        layers: &mut [LayerParams<T>],
        layer: usize,
        input: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let (out, cache) = forward_layer(&mut layers[layer], &self.values[input], mode)?;
        Ok(self.push(out, Step::Param { layer, input, cache }))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = relu(&self.values[input]);
        self.push(out, Step::Relu { input })
    }

    pub fn pool(&mut self, input: ValueId) -> Result<ValueId> {
        let (out, mask) = maxpool2(&self.values[input])?;
        Ok(self.push(out, Step::Pool { input, mask }))
    }

    pub fn avgpool(&mut self, input: ValueId) -> ValueId {
        let out = avgpool_global(&self.values[input]);
        self.push(out, Step::AvgPool { input })
    }

    /// Single inputs pass through without a step.
    pub fn fuse(&mut self, kind: FusionKind, inputs: Vec<ValueId>, stage: usize) -> Result<ValueId> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.values[i]).collect();
        let (out, cache) = elementwise_fuse(kind, &refs, stage)?;
        Ok(self.push(out, Step::Fuse { inputs, cache }))
    }

    /// Every piecewise-linear decision of the pass: ReLU input signs, pool
    /// winners and max-fusion winners.
    pub fn pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                Step::Relu { input } => out.extend(
                    self.values[*input]
                        .data()
                        .iter()
                        .map(|&v| u8::from(v > T::zero())),
                ),
                Step::Pool { mask, .. } => out.extend_from_slice(mask.winners()),
                Step::Param {
                    cache: OpCache::MaxPool(mask),
                    ..
                } => out.extend_from_slice(mask.winners()),
                Step::Fuse {
                    cache: FuseCache::Max { winners, .. },
                    ..
                } => out.extend(winners.iter().map(|&w| w as u8)),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass seeded with `seeds`; parameter gradients are added to
    /// `grads`. Returns the gradient with respect to the input.
    pub fn backward(
        &self,
        layers: &[LayerParams<T>],
        grads: &mut [LayerGrads<T>],
        seeds: Vec<(ValueId, Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        fn add<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }
        for (id, g) in seeds {
            if g.shape() != self.values[id].shape() {
                return Err(Error::Shape(format!(
                    "gradient seed has shape {} but the value has {}",
                    g.shape(),
                    self.values[id].shape()
                )));
            }
            add(&mut pending[id], g)?;
        }
        let mut d_input = Tensor::zeros(self.values[Self::INPUT].shape());
        for i in (0..self.steps.len()).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            match &self.steps[i] {
                Step::Input => d_input = g,
                Step::Param { layer, input, cache } => {
                    let bundle = backward_layer(&layers[*layer], &self.values[*input], cache, &g)?;
                    grads[*layer].accumulate(&bundle.d_params);
                    add(&mut pending[*input], bundle.d_input)?;
                }
                Step::Relu { input } => {
                    let d = relu_backward(&self.values[*input], &g)?;
                    add(&mut pending[*input], d)?;
                }
                Step::Pool { input, mask } => {
                    let d = maxpool2_backward(self.values[*input].shape(), mask, &g)?;
                    add(&mut pending[*input], d)?;
                }
                Step::AvgPool { input } => {
                    let d = avgpool_global_backward(self.values[*input].shape(), &g)?;
                    add(&mut pending[*input], d)?;
                }
                Step::Fuse { inputs, cache } => {
                    for (&input, d) in inputs.iter().zip(fuse_backward(cache, &g)?) {
                        add(&mut pending[input], d)?;
                    }
                }
            }
        }
        Ok(d_input)
    }
}
