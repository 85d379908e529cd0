//! Scalar abstraction: every numeric module is generic over `f32`/`f64`.

use std::fmt::Display;
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rustfft::FftNum;

/// Floating-point scalar usable everywhere in the workbench.
///
/// `FftNum` brings `Copy + Debug + Send + Sync + 'static`, so this is the
/// only bound modules need to name.
pub trait Scalar: Float + FloatConst + NumAssign + FromPrimitive + Sum<Self> + FftNum + Display {
    /// Lossless-enough conversion from `f64` for constants and tolerances.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn takes_scalar<T: Scalar>(x: T) -> T {
        x * T::from_f64c(2.0)
    }

    #[test]
    fn both_float_widths_implement_scalar() {
        assert_eq!(takes_scalar(1.5f32), 3.0f32);
        assert_eq!(takes_scalar(1.5f64), 3.0f64);
    }
}
