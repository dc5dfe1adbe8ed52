//! Robust estimation of Matérn covariance parameters for replicated Gaussian
//! random fields by maximum Lq-likelihood.

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod estimate;
pub mod io;
pub mod likelihood;
pub mod matern;
pub mod qselect;
pub mod simulate;
pub mod specfun;
pub mod sweep;
pub mod variogram;

pub use error::{Error, Result};
pub use likelihood::ReplicateSet;
pub use matern::{LocationSet, MaternParams};
