//! Dense double-precision tensors with a recorded reverse-mode tape.

mod gradcheck;
mod layers;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_fault, DEFAULT_EPS, TOLERANCE};
pub use layers::{activate, affine, lstm_batched, lstm_forward, Activation, LstmVars};
pub use tape::{pool_bin, sigmoid, Gradients, OpKind, PoolMode, Tape, Var};
pub use tensor::Tensor;
