//! Library side of the `estab-dp` command-line tool: run configuration,
//! the end-to-end pipeline commands and accuracy metrics.

pub mod config;
pub mod metrics;
pub mod pipeline;
