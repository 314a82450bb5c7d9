//! Dense N-dimensional tensors with row-major layout.
//!
//! A tensor is an immutable value once constructed; everything downstream
//! (autodiff, layers, training) produces new tensors rather than mutating.
//! The one sanctioned exception is the optimizer, which updates parameter
//! tensors in place through [`Tensor::as_mut_slice`].

use std::fmt;

use crate::error::{Error, ErrorKind, Result};

const MODULE: &str = "tensor-autodiff";

/// Element type tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Payload width in bytes.
    fn byte_width() -> usize;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $width:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $width];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
            fn byte_width() -> usize {
                $width
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

/// Dense tensor: shape plus a flat row-major element buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    elems: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, checking that the element count matches the shape.
    pub fn from_vec(dims: impl Into<Vec<usize>>, elems: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(MODULE, format!("zero-sized dim in {:?}", dims)));
        }
        let expect: usize = dims.iter().product();
        if elems.len() != expect {
            return Err(Error::shape(
                MODULE,
                format!("{} elems do not fill dims {:?} (need {})", elems.len(), dims, expect),
            ));
        }
        Ok(Tensor { dims, elems })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        Tensor { dims, elems: vec![T::ZERO; n] }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        Tensor { dims, elems: vec![value; n] }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![], elems: vec![value] }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        Tensor { dims, elems: (0..n).map(|i| f(i)).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.elems.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.elems.len() == 1
    }

    /// The sole element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.elems.len() == 1 {
            Ok(self.elems[0])
        } else {
            Err(Error::new(
                MODULE,
                ErrorKind::Contract,
                format!("item() on tensor with dims {:?}", self.dims),
            ))
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.elems
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.elems
    }

    /// Interpret as (channels, height, width).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(MODULE, format!("expected rank-3 dims, got {:?}", self.dims))),
        }
    }

    /// Interpret as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(MODULE, format!("expected rank-2 dims, got {:?}", self.dims))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { dims: self.dims.clone(), elems: self.elems.iter().map(|&v| f(v)).collect() }
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshaped(&self, dims: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        Tensor::from_vec(dims, self.elems.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.elems.iter().all(|v| v.is_finite())
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean_f64(&self) -> f64 {
        let sum: f64 = self.elems.iter().map(|v| v.to_f64()).sum();
        sum / self.elems.len() as f64
    }

    /// Convert element type (used by grad checking, which runs in f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            elems: self.elems.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.dims, self.elems)
        } else {
            write!(f, "Tensor{:?}[{} elems]", self.dims, self.numel())
        }
    }
}
