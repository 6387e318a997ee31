pub mod cli;
pub mod config;
pub mod data;
pub mod edm;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
