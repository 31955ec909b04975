//! Confidentiality-preserving release of establishment statistics.
//!
//! The crate covers the full pipeline: neighbor functions and their
//! uncertainty intervals, noise mechanisms with releasable or estimated
//! variances, budget accounting, weighted least-squares microdata
//! reconstruction, bias simulations, and a synthetic fixture generator.

pub mod accountant;
pub mod biassim;
pub mod dataset;
pub mod mechanisms;
pub mod microdata;
pub mod neighbor;
pub mod numerics;
pub mod syngen;

pub use numerics::RngStream;
