//! Scalar abstraction: every numeric path in this crate is generic over the
//! float type, so the same code runs in f32 for speed and f64 for
//! tolerance-critical verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar, implemented for `f32` and `f64` only.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Type tag recorded in checkpoints so a file cannot be reloaded at the
    /// wrong precision.
    const DTYPE: &'static str;

    /// Lossy conversion from `f64` (hyperparameters, test constants).
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to any scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
