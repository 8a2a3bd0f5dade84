//! Dense rank-4 tensors and the layer primitives used by the fused networks.
//!
//! Every op comes as a pure forward function plus an analytic backward
//! (vector-Jacobian product). Backward functions receive the forward input
//! and output instead of cached copies, so a computation tape never stores an
//! activation twice.

mod activation;
mod conv;
mod fuse;
mod gemm;
mod layer;
mod linear;
mod loss;
mod norm;
mod pool;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use activation::{relu, relu_backward};
pub use conv::{conv2d, conv2d_backward};
pub use fuse::{elementwise_fuse, fuse_backward, FuseCache, FusionKind};
pub use layer::{
    backward_layer, forward_layer, GradBundle, LayerGrads, LayerKind, LayerParams, Mode, Node,
    OpCache, ParamRole,
};
pub use linear::{linear_classifier, linear_classifier_backward};
pub use loss::{softmax, softmax_xent};
pub use norm::{batchnorm, batchnorm_backward, BnCache, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avgpool_global, avgpool_global_backward, maxpool2, maxpool2_backward, PoolMask};

pub(crate) use gemm::matmul;

/// Floating-point precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// Element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Send + Sync + fmt::Debug + 'static
{
    const PRECISION: Precision;
    /// Checkpoint dtype tag.
    const DTYPE_TAG: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_chunk(chunk: &[u8]) -> Self;

    #[allow(clippy::too_many_arguments)]
    #[doc(hidden)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const DTYPE_TAG: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
    fn from_le_chunk(chunk: &[u8]) -> Self {
        f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"))
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const DTYPE_TAG: u8 = 2;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
    fn from_le_chunk(chunk: &[u8]) -> Self {
        f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of values in one (h, w) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Number of values in one sample.
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major (N, C, H, W) array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} values)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Values of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.sample();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Convert to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Gather samples by index into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let s = self.shape.sample();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor {
            shape: self.shape.with_n(indices.len()),
            data,
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: shape {} differs from {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}
