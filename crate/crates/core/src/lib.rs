pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
