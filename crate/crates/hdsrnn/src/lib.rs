//! Multivariate geo-sensory time-series forecasting with a hybrid dual-stage
//! attention encoder-decoder RNN.
//!
//! The toolkit covers the full experimental loop for water-distribution
//! sensor panels: synthetic data generation, pretreatment (differencing,
//! seasonal decomposition, normalization), model training with Adam and early
//! stopping, classical baselines, evaluation sweeps, and attention-weight
//! export. Everything runs on a small built-in reverse-mode autodiff engine
//! in 64-bit floats.

pub mod attention;
pub mod baselines;
pub mod config;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
