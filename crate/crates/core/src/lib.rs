pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod model;
pub mod decoding;
pub mod metrics;
pub mod training;
pub mod checks;
pub mod cli;
pub mod spectral;
