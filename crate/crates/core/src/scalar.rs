//! Scalar abstraction for the numeric core.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels run in
//! f32 or f64. The shipped binaries pin f64 through the crate-root aliases;
//! the f32 instantiation exists mainly as a cross-check that nothing in the
//! core depends on a particular float width.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an f64 constant into the scalar type.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("constant must be representable")
    }

    /// Widens to f64 for serialization and reporting. Exact for f32 and f64.
    fn widen(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn of_is_exact_for_f64() {
        let x = 0.1f64;
        assert_eq!(f64::of(x).to_bits(), x.to_bits());
    }

    #[test]
    fn widen_roundtrips_f32() {
        let x = 0.25f32;
        assert_eq!(x.widen(), 0.25f64);
    }
}
