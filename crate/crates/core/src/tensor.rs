//! Dense row-major tensors over a configurable scalar type.
//!
//! `Tensor` is the universal value carrier: immutable once built, cheap to
//! clone (shared storage), with shape metadata checked by every consumer.
//! Training runs either in `f32` or `f64`; all verification oracles require
//! `f64` because finite-difference checks are meaningless at single
//! precision.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar type usable as tensor element: `f32` or `f64`.
pub trait Real:
    num_traits::Float + num_traits::FloatConst + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Which scalar type a run uses. `F64` is mandatory for oracle suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Dense multi-dimensional array, row-major, immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(&mut f).collect())
    }

    /// Identity matrix [n, n].
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(
            &[n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Flat offset for a multi-index; debug-checked against the shape.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(
                i < self.shape[d],
                "index {idx:?} out of shape {:?}",
                self.shape
            );
            off = off * self.shape[d] + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Flat index of the first NaN/Inf entry, if any.
    pub fn find_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn is_finite(&self) -> bool {
        self.find_nonfinite().is_none()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Copy with one flat element replaced; used by finite-difference probes.
    pub fn with_elem(&self, flat: usize, v: T) -> Self {
        let mut data = self.data.as_ref().clone();
        data[flat] = v;
        Tensor::from_vec(&self.shape, data)
    }
}

/// Channel split into even- and odd-indexed halves (its own documented
/// inverse via [`inverse_cross`]). Channel count must be even.
pub fn cross<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    assert!(
        c.is_multiple_of(2),
        "cross needs an even channel count, got {c}"
    );
    let rest: usize = x.shape()[1..].iter().product();
    let half_shape: Vec<usize> = std::iter::once(c / 2)
        .chain(x.shape()[1..].iter().copied())
        .collect();
    let mut even = Vec::with_capacity(c / 2 * rest);
    let mut odd = Vec::with_capacity(c / 2 * rest);
    for ch in 0..c {
        let slice = &x.data()[ch * rest..(ch + 1) * rest];
        if ch % 2 == 0 {
            even.extend_from_slice(slice);
        } else {
            odd.extend_from_slice(slice);
        }
    }
    (
        Tensor::from_vec(&half_shape, even),
        Tensor::from_vec(&half_shape, odd),
    )
}

/// Interleave two equally shaped tensors back into even/odd channels.
pub fn inverse_cross<T: Real>(even: &Tensor<T>, odd: &Tensor<T>) -> Tensor<T> {
    assert_eq!(even.shape(), odd.shape(), "inverse_cross halves must match");
    let half = even.shape()[0];
    let rest: usize = even.shape()[1..].iter().product();
    let full_shape: Vec<usize> = std::iter::once(2 * half)
        .chain(even.shape()[1..].iter().copied())
        .collect();
    let mut data = Vec::with_capacity(2 * half * rest);
    for ch in 0..half {
        data.extend_from_slice(&even.data()[ch * rest..(ch + 1) * rest]);
        data.extend_from_slice(&odd.data()[ch * rest..(ch + 1) * rest]);
    }
    // data currently pairs (even ch, odd ch) blocks in order, which is
    // exactly channels 0,1,2,3,... of the output.
    Tensor::from_vec(&full_shape, data)
}

/// First-half / second-half channel split (inverse of [`concat_channels`]).
pub fn split_channels<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    assert!(
        c.is_multiple_of(2),
        "split needs an even channel count, got {c}"
    );
    (slice_channels(x, 0, c / 2), slice_channels(x, c / 2, c))
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let c = x.shape()[0];
    assert!(lo < hi && hi <= c, "channel slice {lo}..{hi} out of {c}");
    let rest: usize = x.shape()[1..].iter().product();
    let shape: Vec<usize> = std::iter::once(hi - lo)
        .chain(x.shape()[1..].iter().copied())
        .collect();
    Tensor::from_vec(&shape, x.data()[lo * rest..hi * rest].to_vec())
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        a.shape()[1..],
        b.shape()[1..],
        "concat spatial dims must match"
    );
    let shape: Vec<usize> = std::iter::once(a.shape()[0] + b.shape()[0])
        .chain(a.shape()[1..].iter().copied())
        .collect();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}
