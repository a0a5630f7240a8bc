use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Scalar type the numeric core is generic over: `f32` for training and
/// inference, `f64` for gradient checks and DSP oracles.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for literals and config values.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Widening conversion for reporting and file formats.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    /// Narrowing conversion used by the float32 file formats.
    fn to_f32_c(self) -> f32 {
        self.to_f32().expect("f32 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
