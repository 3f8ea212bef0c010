//! The scalar abstraction every numerical routine in the crate is generic over.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Special functions (`erf`, the Beta function) are evaluated in `f64` and
/// rounded back, which is exact enough for both implementors.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn idx(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable in scalar type")
    }

    fn erf(self) -> Self {
        Self::lit(statrs::function::erf::erf(self.f64()))
    }

    /// Standard normal CDF.
    fn norm_cdf(self) -> Self {
        Self::lit(0.5 * statrs::function::erf::erfc(-self.f64() / std::f64::consts::SQRT_2))
    }

    /// Standard normal density.
    fn norm_pdf(self) -> Self {
        let x = self;
        (-(x * x) / Self::lit(2.0)).exp() / (Self::TAU()).sqrt()
    }

    /// Tolerance floor: a few hundred ulps at unit scale.
    fn tol_floor() -> Self {
        Self::epsilon() * Self::lit(256.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Beta function `B(a, b)` in the scalar type.
pub fn beta_fn<T: Real>(a: T, b: T) -> T {
    T::lit(statrs::function::beta::beta(a.f64(), b.f64()))
}
