//! Differentiable primitives and the tape that records them.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::check_gradients;
pub use matrix::{Matrix, Scalar};
pub use params::{ParamId, ParameterStore};
pub use tape::{Index, Tape, Var};

/// Builds a shared index list.
pub fn index(values: impl IntoIterator<Item = u32>) -> Index {
    values.into_iter().collect()
}
