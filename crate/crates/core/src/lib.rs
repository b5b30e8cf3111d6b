//! Simultaneous sign-language translation with a learned segment predictor
//! and wait-k decoding, on a small from-scratch autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod boundary;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
