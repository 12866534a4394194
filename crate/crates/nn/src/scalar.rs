//! Element type abstraction: the engine runs in f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point element type usable by the tape.
///
/// `LinalgScalar` gives access to ndarray's matrixmultiply-backed GEMM for
/// both f32 and f64.
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
