//! Tensors, reverse-mode differentiation, Adam, seeded randomness and the
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod rng;
pub mod store;
pub mod tape;
pub mod tensor;

pub use gradcheck::{
    check_gradients, compare_gradients, relative_error, GradCheckOptions, GradReport,
};
pub use rng::Rng;
pub use store::{adam_step, AdamConfig, ParamEntry, ParamId, ParameterStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{
    axpy, dot, linear_backward, linear_forward, matmul, sigmoid, silu, softmax, softplus,
    transpose, Tensor,
};
