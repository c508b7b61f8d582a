//! Floating-point scalar abstraction.
//!
//! Everything numeric in the crate is generic over [`Scalar`] so that the
//! same code paths run at 32-bit (training precision) and 64-bit (tight
//! oracle checks). [`Real`] is the crate-wide default and flips to `f64`
//! with the `f64` cargo feature.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Storage width in bits.
    const BITS: u32;

    /// Lossy conversion from an `f64` literal or computed constant.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
