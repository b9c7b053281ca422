//! Floating-point scalar abstraction: the numeric core is generic over f32/f64.

use std::fmt::{Debug, Display};

/// Scalar element type of tensors: f32 for training/inference, f64 for
/// gradient checks and tight invertibility verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from f64 used by seeded initializers so that f32 and f64
    /// models built from the same seed agree up to rounding.
    fn of_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 -> scalar conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }

    fn of_usize(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("usize -> scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
