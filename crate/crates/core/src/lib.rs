//! Learned P-frame video codec with multi-reference motion prediction,
//! residual prediction and an in-loop filter.

pub mod codecnets;
pub mod entropy;
pub mod error;
pub mod evalkit;
pub mod layers;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tape, Tensor, Var};
