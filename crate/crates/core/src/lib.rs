pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod output;
pub mod report;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
