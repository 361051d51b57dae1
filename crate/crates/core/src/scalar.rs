//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point element type: `f32` or `f64`.
///
/// Storage happens in `Self`; reductions widen to `f64` and narrow back
/// once at the end, so `f32` tensors still agree with `f64` oracles to
/// roughly single-precision rounding.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Default + Debug + Display + Send + Sync + 'static
{
    #[inline]
    fn widen(self) -> f64 {
        // Float -> f64 is total for f32/f64.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for a literal in the generic scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::narrow(v)
}
