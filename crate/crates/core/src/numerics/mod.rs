//! Dense tensors, a reverse-mode gradient tape, seeded random streams and a
//! finite-difference gradient checker.

mod gradcheck;
mod param;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, REL_ERR_FLOOR};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Epsilon added inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
