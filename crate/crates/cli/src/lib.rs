//! Command-line pipeline around `stainforge-core`: preprocess, train,
//! evaluate, synthetic data and the AF-tuning HTTP service.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod plots;
pub mod serve;

pub use config::RunConfig;
pub use error::{CliError, Result};
