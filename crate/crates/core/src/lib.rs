//! Core library: tensors with reverse-mode autodiff, attention blocks, the
//! history compressor, a synthetic web environment, baselines, training, and
//! evaluation.

pub mod baselines;
pub mod compressor;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
