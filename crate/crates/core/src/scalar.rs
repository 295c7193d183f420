//! Scalar abstraction: every numeric kernel is generic over `f32`/`f64`.

use serde::{Deserialize, Serialize};

/// Floating-point scalar usable by all numeric kernels.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from `f64` (rounds for `f32`).
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 converts to scalar")
    }

    /// Conversion from the on-disk `f32` representation (exact).
    fn of_f32(x: f32) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f32 converts to scalar")
    }

    /// Widen to `f64` for reporting and metrics.
    fn wide(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar widens to f64")
    }

    /// Round to the on-disk `f32` representation.
    fn narrow(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar narrows to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Computation precision selected per run; disk files are always f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}
