//! Probabilistic day-ahead forecasting of daily load profiles with a
//! conditional VAE whose likelihood uses a learned pattern dictionary.

pub mod condition;
pub mod cvae;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod forecast;
pub mod lowrank;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod qrnn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
