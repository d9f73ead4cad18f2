//! Causal effect estimation with Bayesian additive regression trees.
//!
//! The pipeline imputes missing cells with chained random-forest models,
//! fits one BART model per completed dataset, estimates binary and
//! continuous-dose treatment effects with common-support diagnostics and
//! combines the per-imputation results with Rubin's rules.

pub mod bart;
pub mod causal;
pub mod config;
pub mod dataset;
pub mod design;
pub mod error;
pub mod fixtures;
pub mod forest;
pub mod mice;
pub mod pipeline;
pub mod pooling;
pub mod report;
pub mod stats;
pub mod support;
pub mod synth;

pub use error::{Error, Result};
