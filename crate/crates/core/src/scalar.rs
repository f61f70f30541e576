//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same code runs in `f32`
//! or `f64`. Experiments and checkpoints use [`crate::Real`] (`f64`); gradient
//! verification requires the 64-bit instantiation.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar usable in every tensor operation of this crate.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the active scalar type.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::from(x).expect("finite f64 converts to any Scalar")
}

/// Convert a count into the active scalar type.
#[inline]
pub fn s_usize<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("usize converts to any Scalar")
}
