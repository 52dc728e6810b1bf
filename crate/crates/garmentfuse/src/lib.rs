//! File formats, configuration and command orchestration around
//! `garmentfuse-core`.

// `!(x > 0.0)` is the NaN-rejecting form used by validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod io;
pub mod ppm;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
