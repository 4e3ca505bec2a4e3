//! Supervised functional PCA with covariate-dependent mean and covariance.
//!
//! Curves observed at sparse, possibly irregular time points are modeled as
//! a smooth mean surface in (time, covariate) plus a rank-r random component
//! whose covariance also varies smoothly with the covariate, all on top of
//! Gaussian noise. The covariance is kept positive semi-definite by
//! construction through a factor map, fitting is penalized Gaussian maximum
//! likelihood with a fast low-rank evaluation path, and prediction gives
//! score posteriors and pointwise intervals for new partially observed
//! curves.

pub mod basis;
pub mod cli;
pub mod error;
pub mod fit;
pub mod init;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod penalty;
pub mod predict;
pub mod quadrature;
pub(crate) mod seedmix;
pub mod sim;
#[doc(hidden)]
pub mod testsupport;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run()
}
