//! Graded transformers with utility-aware morphic routing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod category;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod graded;
pub mod model;
pub mod objective;
pub mod routing;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{is_masked, Act, Gradients, Tape, Var, MASKED};
pub use tensor::Tensor;
