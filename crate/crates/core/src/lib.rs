//! Generalized Dropout: learnable bernoulli gates with beta priors
//! (Dropout++, stochastic architecture learning) on top of a small `f64`
//! training engine, plus the oracles used to check it.

pub mod error;
pub mod arch_select;
pub mod checkpoint;
pub mod data;
pub mod gates;
pub mod network;
pub mod oracle;
pub mod regularizers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
