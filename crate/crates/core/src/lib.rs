//! Differentiable search for compact image-to-image generators under a
//! FLOPs budget, trained by distillation from a frozen teacher.

pub mod arch;
pub mod budget;
pub mod distill;
pub mod engine;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod quantize;
pub mod search_space;
pub mod supernet;

pub use error::{Error, Result};
