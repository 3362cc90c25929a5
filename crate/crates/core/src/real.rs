use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of every tensor in the engine.
///
/// Implemented for `f32` (production runs) and `f64` (gradcheck and oracle
/// comparisons).
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const MODE: NumericMode;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    const MODE: NumericMode = NumericMode::F32;
}

impl Real for f64 {
    const MODE: NumericMode = NumericMode::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumericMode {
    #[default]
    F32,
    F64,
}

impl NumericMode {
    pub fn name(self) -> &'static str {
        match self {
            NumericMode::F32 => "f32",
            NumericMode::F64 => "f64",
        }
    }
}

impl std::str::FromStr for NumericMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(NumericMode::F32),
            "f64" => Ok(NumericMode::F64),
            other => Err(format!("unknown numeric mode `{other}` (expected f32 or f64)")),
        }
    }
}
