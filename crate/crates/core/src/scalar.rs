//! Numeric abstraction shared by the merging, calibration and overlay math.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used for probabilities, coordinates, scores and areas.
///
/// Implemented for `f32` and `f64`. `Display`/`FromStr` are required so CSV
/// exports round-trip exactly (Rust prints the shortest representation that
/// parses back to the same value).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + FromStr + Default + Send + Sync + 'static
{
    /// Lossy conversion used for literals and tolerances.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Rounds half-up and clamps into the 8-bit channel range.
pub fn to_channel<S: Scalar>(v: S) -> u8 {
    let r = (v + S::lit(0.5)).floor();
    if r <= S::zero() {
        0
    } else if r >= S::lit(255.0) {
        255
    } else {
        r.to_u8().unwrap_or(255)
    }
}
