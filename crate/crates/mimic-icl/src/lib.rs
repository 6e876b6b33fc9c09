//! Shift-vector approximations of in-context learning on a small
//! decoder-only transformer, with the exact attention decomposition that
//! motivates them, a distillation trainer, and synthetic mapping tasks for
//! end-to-end checks.

pub mod attention;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod shift_variants;
pub mod tasks;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
