use crate::error::Result;
use crate::state::StateVector;

/// A time-dependent field `(x, y, t) -> StateVector`, either a vector field
/// `v(x, y, t)` or a score `s(x, y, t)`.
pub trait Field {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector>;
}

impl<F> Field for F
where
    F: Fn(&StateVector, &StateVector, f64) -> Result<StateVector>,
{
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        self(x, y, t)
    }
}
