//! Dense row-major tensors and the named parameter store.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::rng::Stream;

/// Scalar types the kernels and tape are generic over. f32 is the compute
/// type; f64 exists for gradient verification only.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max_val(self, other: Self) -> Self;
    fn min_val(self, other: Self) -> Self;
    fn abs(self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline(always)]
            fn max_val(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline(always)]
            fn min_val(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBase<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(default)]
    pub requires_grad: bool,
}

/// The 32-bit compute tensor used everywhere outside gradient verification.
pub type Tensor = TensorBase<f32>;

impl<T: Real> TensorBase<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorBase { shape: shape.to_vec(), data: vec![T::ZERO; n], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        TensorBase { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        TensorBase { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Build from raw data; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(TensorBase { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Gaussian init scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, stream: &mut Stream) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(stream.next_normal() * std)).collect();
        TensorBase { shape: shape.to_vec(), data, requires_grad: false }
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same data, new shape. Element counts must agree.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> TensorBase<U> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64(&self) -> TensorBase<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> TensorBase<f32> {
        self.map(|v| v.to_f64() as f32)
    }
}

/// Named parameter bundle. Iteration order is the name order, so every
/// traversal (init, update, serialization) is deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    /// Optimizer steps applied to this bundle so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a fresh parameter. Names are unique; re-registering is a bug.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let prev = self.params.insert(name.to_string(), tensor);
        assert!(prev.is_none(), "duplicate parameter {name:?}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(TensorBase::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorBase::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn store_is_name_ordered() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(&[1]));
        s.insert("a", Tensor::zeros(&[1]));
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_name_panics() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1]));
        s.insert("a", Tensor::zeros(&[1]));
    }
}
