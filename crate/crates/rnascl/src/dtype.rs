use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of the engine. Training and search run at `f32`; gradient
/// verification suites instantiate everything at `f64` so finite-difference
/// tolerances stay tight.
pub trait Real:
    Float + num_traits::NumAssignOps + Sum + Display + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Next representable value strictly closer to `toward` (self if equal).
    fn step_toward(self, toward: Self) -> Self;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn step_toward(self, toward: Self) -> Self {
        if toward > self {
            self.next_up()
        } else if toward < self {
            self.next_down()
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn step_toward(self, toward: Self) -> Self {
        if toward > self {
            self.next_up()
        } else if toward < self {
            self.next_down()
        } else {
            self
        }
    }
}

/// Shorthand for converting an `f64` constant into the element type.
pub fn real<E: Real>(x: f64) -> E {
    E::from_f64(x)
}
