//! Minimal dense-tensor and reverse-mode differentiation engine.
//!
//! The engine is deliberately small: two-dimensional tensors, a handful of
//! primitives, and a tape whose backward pass is itself recorded so that
//! gradients of gradients are available to the meta-update.

mod checkpoint;
mod dense;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_mlp, mlp_from_str, mlp_to_string, save_mlp};
pub use dense::{Activation, Dense, DenseVars, Mlp, MlpVars};
pub use optim::{Adam, Sgd};
pub use tape::{log_sum_exp, stack_rows, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
