pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
