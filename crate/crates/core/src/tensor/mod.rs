//! Dense rank-4 tensors and the numeric kernels the network is built from.
//!
//! Layout is always `(n, c, h, w)` row-major. Every kernel here is a pure
//! function of its inputs; backward kernels used by the autograd tape live
//! next to their forward counterparts.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;
mod scalar;

use std::fmt;

use crate::error::{shape_err, Error, Result};

pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub(crate) use conv::{conv2d_backward, conv_transpose2d_backward};
pub use elementwise::{
    activation, add, concat_channels, matmul, mul, relu, scale, sigmoid, slice_channels,
    softmax_rows, transpose_last2, Activation,
};
pub(crate) use elementwise::{
    broadcast_reduce, matmul_backward, sigmoid_scalar, softmax_rows_backward,
};
pub use norm::{batchnorm2d, BatchNormOutput, NormMode, BN_EPS, BN_MOMENTUM};
pub(crate) use norm::batchnorm2d_backward;
pub use pool::{global_avg_pool, pool2d, PoolMode};
pub(crate) use pool::{global_avg_pool_backward, pool2d_backward, pool2d_with_argmax};
pub use resize::bilinear_resize;
pub(crate) use resize::bilinear_resize_backward;
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatRef};

/// Shape of a [`Tensor4`]: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Flat offset of `(n, c, h, w)`.
    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Size of one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor4{} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..SHOWN])
        }
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_dims(shape)?;
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Shape4>, value: T) -> Result<Self> {
        let shape = shape.into();
        check_dims(shape)?;
        Ok(Self {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(
        shape: impl Into<Shape4>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let shape = shape.into();
        check_dims(shape)?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    /// Scalar tensor of shape (1,1,1,1).
    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    /// Internal constructor for kernels whose output shape is known valid.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        check_dims(shape)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("zip of {} and {}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of the flattened tensors.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err!("dot of {} and {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Plane `(n, c)` as a contiguous slice of length h·w.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Sample `n` as a contiguous slice of length c·h·w.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {} and {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

fn check_dims(shape: Shape4) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::Shape(format!("all dimensions must be >= 1, got {shape}")));
    }
    Ok(())
}
