use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the numeric kernels are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
