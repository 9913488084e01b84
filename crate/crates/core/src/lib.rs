//! Vector-quantization-aware training.
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer_quant;
pub mod model;
pub mod nas;
pub mod numerics;
pub mod quantizers;
pub mod reports;
pub mod trainer;

pub use error::{Error, IdxError, Result};
