//! Causal multi-channel marketing-mix modelling: structure discovery and forecasting
//! across heterogeneous shops with a variational graph encoder and recurrent decoder.

pub mod data;
pub mod datagen;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
