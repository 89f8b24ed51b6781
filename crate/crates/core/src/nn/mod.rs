//! Dense `f64` tensors with a reverse-mode autodiff tape.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod ops;
mod param;
mod rng;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var, PAD_ID};
pub use param::{ParamId, Parameter};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use tensor::Tensor;
