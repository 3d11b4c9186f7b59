//! Scalar abstraction: every numeric routine in the lab is generic over a
//! floating-point type. Training runs in f64; feature stores hold f32.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable for all core math.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Norms at or below this are treated as degenerate rather than fudged.
    fn eps_norm() -> Self {
        Self::from_f64(1e-12).unwrap()
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
