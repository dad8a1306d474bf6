pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod features;
pub mod frontend;
pub mod joiner;
pub mod loss;
pub mod model;
pub mod predictor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};

/// Epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
