//! Scalar abstraction shared by the numerical core.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the solver stack is generic over.
///
/// Implemented for `f32` and `f64`. Everything that touches disk or the
/// closed-form pricing formulas goes through `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn is_finite_val(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {
    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}
