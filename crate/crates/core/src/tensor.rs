//! Dense tensor container and the scalar precision abstraction.
//!
//! Precision is a global mode chosen at instantiation: the whole stack is
//! generic over [`Scalar`], with `f32` used for training speed and `f64`
//! wherever exactness is asserted (gradient checks, oracle suites).

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Which floating-point width a computation ran in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Element type of all tensors. Implemented for `f32` and `f64` only.
pub trait Scalar: Copy + PartialOrd + Debug + Send + Sync + 'static {
    const PRECISION: Precision;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn div(self, other: Self) -> Self;
    fn neg(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn add(self, other: Self) -> Self {
                self + other
            }
            #[inline]
            fn sub(self, other: Self) -> Self {
                self - other
            }
            #[inline]
            fn mul(self, other: Self) -> Self {
                self * other
            }
            #[inline]
            fn div(self, other: Self) -> Self {
                self / other
            }
            #[inline]
            fn neg(self) -> Self {
                -self
            }
        }
    };
}

impl_scalar!(f32, Precision::F32);
impl_scalar!(f64, Precision::F64);

/// Contiguous row-major dense tensor.
///
/// Invariant: `shape.iter().product() == values.len()`. The checked
/// constructors additionally reject non-finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Checked constructor: validates extent product and finiteness.
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Eval(format!("non-finite value {:?} in tensor", v)));
        }
        Ok(Tensor { shape, values })
    }

    /// Internal constructor for op outputs whose finiteness is the op's
    /// responsibility.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on tensor with {} values", self.values.len());
        self.values[0]
    }

    /// Same values under a new shape with equal extent product.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.values.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} values into {:?}",
                self.values.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            values: self.values.clone(),
        })
    }

    /// Convert element type (used to move fixtures between precisions).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`, the relative error used by every
/// tolerance assertion in the crate.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}
