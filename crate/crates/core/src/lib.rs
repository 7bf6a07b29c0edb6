//! Causal time series generation with a latent environment bank.
//!
//! The crate provides a conditional diffusion generator that supports
//! observational, backdoor-adjusted interventional and counterfactual
//! sampling, a damped-oscillator benchmark with counterfactual ground truth,
//! ingestion for real CSV datasets, and the distribution metrics and
//! diagnostics used to evaluate generated series.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod envinfer;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ingest;
pub mod nn;
pub mod oscillator;
pub mod pipeline;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};
