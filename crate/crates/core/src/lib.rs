//! Temporal dynamic graph learning for multivariate time series forecasting.
//!
//! Each sliding window of a multivariate series becomes a small directed graph
//! whose nodes are the window's timesteps. Node features come from a
//! dilated-convolution extractor, forward edges are sampled from a learned link
//! predictor through a Gumbel relaxation, and mean-aggregation message passing
//! feeds the last node into a two-layer forecasting head. Everything runs on a
//! small reverse-mode differentiation tape in [`autodiff`].

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod extractor;
pub mod forecaster;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

#[cfg(test)]
#[path = "../tests/common/oracles.rs"]
mod testutil;
