pub mod backbone;
pub mod bench;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
