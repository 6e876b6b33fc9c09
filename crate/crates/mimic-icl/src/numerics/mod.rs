//! Minimal dense-tensor math with reverse-mode differentiation and a
//! finite-difference gradient oracle. Everything is double precision and
//! single threaded per tape.

pub mod check;
pub mod tape;
pub mod tensor;

pub use check::grad_check;
pub use tape::{causal_mask, Mask, Tape, Var};
pub use tensor::{log_sum_exp, matmul, softmax_rows, Tensor};
