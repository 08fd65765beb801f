//! Functional generalized canonical correlation analysis for sparse,
//! irregularly sampled multivariate longitudinal data.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod components;
pub mod covariance;
pub mod data;
pub mod deflation;
pub mod error;
pub mod numerics;
pub mod operators;
pub mod pipeline;
pub mod response;
pub mod sim;
pub mod smooth;
pub mod solver;

pub use error::{FgccaError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
