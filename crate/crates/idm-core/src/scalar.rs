//! Floating-point abstraction so the network and losses run in either
//! precision: f32 for training speed, f64 for finite-difference checks.

use num_traits::{Float, NumCast};
use std::fmt::Debug;
use std::iter::Sum;

pub trait Scalar:
    Float + NumCast + Sum + Default + Debug + Send + Sync + 'static
{
    const PRECISION_NAME: &'static str;
}

impl Scalar for f32 {
    const PRECISION_NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const PRECISION_NAME: &'static str = "f64";
}

/// Lossy cast from f64 into the working precision.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from(x).expect("finite f64 converts to any Scalar")
}

/// Cast up to f64 for reporting and accumulation.
#[inline]
pub fn up<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("Scalar converts to f64")
}
