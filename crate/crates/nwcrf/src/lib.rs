//! File formats, datasets on disk and the `nwcrf` command-line driver on top
//! of `nwcrf-core`.

// `!(x > y)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod netpbm;

pub use error::CliError;
