pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod paths;
pub mod propagator;
pub mod sampler;
pub mod specfun;
pub mod spectral;
pub mod trainer;
pub mod velocity_model;

pub use error::{Error, Result};
