use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type usable by [`Matrix`](super::Matrix) and the
/// gradient graph.
pub trait Scalar: Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Bit pattern widened to 64 bits, used for exact (bitwise) comparisons.
    fn to_bits_u64(self) -> u64;

    /// Converts an `f64` literal, panicking only if the type cannot hold it.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}
