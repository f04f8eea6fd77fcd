//! Non-locally enhanced encoder-decoder network (NLEDN) for single-image
//! rain streak removal, built on a small reverse-mode autodiff core.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
