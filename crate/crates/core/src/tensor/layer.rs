use serde::{Deserialize, Serialize};

use super::{
    avgpool_global, avgpool_global_backward, batchnorm, batchnorm_backward, conv2d,
    conv2d_backward, linear_classifier, linear_classifier_backward, maxpool2, maxpool2_backward,
    relu, relu_backward, BnCache, PoolMask, Scalar, Shape, Tensor,
};
use crate::error::{Error, Result};

/// Layer types used by the catalog networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    BatchNorm,
    Relu,
    MaxPool2,
    AvgPoolGlobal,
    Linear,
}

impl LayerKind {
    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            LayerKind::MaxPool2 => 2,
            _ => 1,
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::AvgPoolGlobal => "avgpool",
            LayerKind::Linear => "linear",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::BatchNorm | LayerKind::Linear
        )
    }
}

/// Train mode normalizes with batch statistics; eval uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Which array of a layer a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        }
    }
}

/// Parameters of one layer. Arrays that do not apply to a kind are empty.
///
/// Conv weights are laid out `[out][in][kh][kw]`, linear weights `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn empty(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerParams {
            kind,
            in_channels,
            out_channels,
            stride: 1,
            padding: 0,
            weights: Vec::new(),
            bias: Vec::new(),
            bn_gamma: Vec::new(),
            bn_beta: Vec::new(),
            bn_running_mean: Vec::new(),
            bn_running_var: Vec::new(),
        }
    }

    /// 3×3 convolution, stride 1, padding 1 (preserves H and W). Weights zeroed.
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerParams {
            padding: 1,
            weights: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
            ..Self::empty(LayerKind::Conv3x3, in_channels, out_channels)
        }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        LayerParams {
            weights: vec![T::zero(); out_channels * in_channels],
            bias: vec![T::zero(); out_channels],
            ..Self::empty(LayerKind::Conv1x1, in_channels, out_channels)
        }
    }

    /// Batch normalization with γ = 1, β = 0, running mean 0 and variance 1.
    pub fn batchnorm(channels: usize) -> Self {
        LayerParams {
            bn_gamma: vec![T::one(); channels],
            bn_beta: vec![T::zero(); channels],
            bn_running_mean: vec![T::zero(); channels],
            bn_running_var: vec![T::one(); channels],
            ..Self::empty(LayerKind::BatchNorm, channels, channels)
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerParams {
            weights: vec![T::zero(); out_features * in_features],
            bias: vec![T::zero(); out_features],
            ..Self::empty(LayerKind::Linear, in_features, out_features)
        }
    }

    pub fn relu() -> Self {
        Self::empty(LayerKind::Relu, 0, 0)
    }

    pub fn maxpool2() -> Self {
        LayerParams {
            stride: 2,
            ..Self::empty(LayerKind::MaxPool2, 0, 0)
        }
    }

    pub fn avgpool_global() -> Self {
        Self::empty(LayerKind::AvgPoolGlobal, 0, 0)
    }

    /// Trainable values (weights, biases, γ, β); running statistics excluded.
    pub fn trainable_count(&self) -> usize {
        self.weights.len() + self.bias.len() + self.bn_gamma.len() + self.bn_beta.len()
    }

    /// Fan-in used by He initialization.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => self.in_channels * 9,
            LayerKind::Conv1x1 | LayerKind::Linear => self.in_channels,
            _ => 0,
        }
    }

    /// Output shape for an input shape, checking channel compatibility.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                if input.c != self.in_channels {
                    return Err(Error::Shape(format!(
                        "{:?}: input channels {} but layer expects {}",
                        self.kind, input.c, self.in_channels
                    )));
                }
                let k = self.kind.kernel();
                let span_h = input.h + 2 * self.padding;
                let span_w = input.w + 2 * self.padding;
                if span_h < k || span_w < k {
                    return Err(Error::Shape(format!(
                        "{:?}: spatial extent {}x{} smaller than kernel",
                        self.kind, input.h, input.w
                    )));
                }
                Ok(Shape::new(
                    input.n,
                    self.out_channels,
                    (span_h - k) / self.stride + 1,
                    (span_w - k) / self.stride + 1,
                ))
            }
            LayerKind::BatchNorm => {
                if input.c != self.bn_gamma.len() {
                    return Err(Error::Shape(format!(
                        "batchnorm: input channels {} but layer has {}",
                        input.c,
                        self.bn_gamma.len()
                    )));
                }
                Ok(input)
            }
            LayerKind::Relu => Ok(input),
            LayerKind::MaxPool2 => {
                if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
                    return Err(Error::Shape(format!(
                        "maxpool2: height {} and width {} must both be even",
                        input.h, input.w
                    )));
                }
                Ok(Shape::new(input.n, input.c, input.h / 2, input.w / 2))
            }
            LayerKind::AvgPoolGlobal => Ok(Shape::new(input.n, input.c, 1, 1)),
            LayerKind::Linear => {
                if input.h != 1 || input.w != 1 {
                    return Err(Error::Shape(format!(
                        "linear: input spatial extent {}x{} must be 1x1",
                        input.h, input.w
                    )));
                }
                if input.c != self.in_channels {
                    return Err(Error::Shape(format!(
                        "linear: input features {} but layer expects {}",
                        input.c, self.in_channels
                    )));
                }
                Ok(Shape::new(input.n, self.out_channels, 1, 1))
            }
        }
    }
}

/// Gradients of a layer's trainable arrays, same layout as [`LayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn zeros_like(p: &LayerParams<T>) -> Self {
        LayerGrads {
            weights: vec![T::zero(); p.weights.len()],
            bias: vec![T::zero(); p.bias.len()],
            bn_gamma: vec![T::zero(); p.bn_gamma.len()],
            bn_beta: vec![T::zero(); p.bn_beta.len()],
        }
    }

    pub fn empty() -> Self {
        LayerGrads {
            weights: Vec::new(),
            bias: Vec::new(),
            bn_gamma: Vec::new(),
            bn_beta: Vec::new(),
        }
    }

    pub fn accumulate(&mut self, other: &LayerGrads<T>) {
        fn add<T: Scalar>(dst: &mut Vec<T>, src: &[T]) {
            if dst.is_empty() {
                dst.extend_from_slice(src);
            } else {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        add(&mut self.weights, &other.weights);
        add(&mut self.bias, &other.bias);
        add(&mut self.bn_gamma, &other.bn_gamma);
        add(&mut self.bn_beta, &other.bn_beta);
    }

    pub fn fill_zero(&mut self) {
        for v in [
            &mut self.weights,
            &mut self.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.weights, &self.bias, &self.bn_gamma, &self.bn_beta]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Result of a backward pass through one op.
#[derive(Clone, Debug)]
pub struct GradBundle<T> {
    pub d_input: Tensor<T>,
    pub d_params: LayerGrads<T>,
}

/// State retained by a forward pass for its backward pass.
#[derive(Clone, Debug)]
pub enum OpCache<T> {
    None,
    BatchNorm(BnCache<T>),
    MaxPool(PoolMask),
}

/// Forward through any parametric or stateless layer.
pub fn forward_layer<T: Scalar>(
    p: &mut LayerParams<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, OpCache<T>)> {
    Ok(match p.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => (conv2d(input, p)?, OpCache::None),
        LayerKind::BatchNorm => {
            let (out, cache) = batchnorm(input, p, mode)?;
            (out, OpCache::BatchNorm(cache))
        }
        LayerKind::Relu => (relu(input), OpCache::None),
        LayerKind::MaxPool2 => {
            let (out, mask) = maxpool2(input)?;
            (out, OpCache::MaxPool(mask))
        }
        LayerKind::AvgPoolGlobal => (avgpool_global(input), OpCache::None),
        LayerKind::Linear => (linear_classifier(input, p)?, OpCache::None),
    })
}

/// Vector-Jacobian product of [`forward_layer`].
pub fn backward_layer<T: Scalar>(
    p: &LayerParams<T>,
    input: &Tensor<T>,
    cache: &OpCache<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let no_params = |d_input| GradBundle {
        d_input,
        d_params: LayerGrads::empty(),
    };
    match (p.kind, cache) {
        (LayerKind::Conv3x3 | LayerKind::Conv1x1, _) => conv2d_backward(input, p, upstream),
        (LayerKind::BatchNorm, OpCache::BatchNorm(c)) => batchnorm_backward(input, p, c, upstream),
        (LayerKind::Relu, _) => Ok(no_params(relu_backward(input, upstream)?)),
        (LayerKind::MaxPool2, OpCache::MaxPool(mask)) => {
            Ok(no_params(maxpool2_backward(input.shape(), mask, upstream)?))
        }
        (LayerKind::AvgPoolGlobal, _) => {
            Ok(no_params(avgpool_global_backward(input.shape(), upstream)?))
        }
        (LayerKind::Linear, _) => linear_classifier_backward(input, p, upstream),
        (kind, _) => Err(Error::BackwardBeforeForward(format!(
            "{kind:?} is missing its forward cache"
        ))),
    }
}

/// A single op with its retained forward state.
#[derive(Clone, Debug)]
pub struct Node<T> {
    pub params: LayerParams<T>,
    retained: Option<(Tensor<T>, OpCache<T>)>,
}

impl<T: Scalar> Node<T> {
    pub fn new(params: LayerParams<T>) -> Self {
        Node {
            params,
            retained: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, cache) = forward_layer(&mut self.params, input, mode)?;
        self.retained = Some((input.clone(), cache));
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor<T>) -> Result<GradBundle<T>> {
        let (input, cache) = self.retained.as_ref().ok_or_else(|| {
            Error::BackwardBeforeForward(format!("{:?} node has not run forward", self.params.kind))
        })?;
        backward_layer(&self.params, input, cache, upstream)
    }
}
