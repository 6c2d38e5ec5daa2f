//! Regression Monte-Carlo solver for backward doubly stochastic differential
//! equations (BDSDEs).
//!
//! The pipeline has three stages:
//!
//! 1. [`grid_paths`]: Euler simulation of the forward state together with the
//!    Brownian increments of the forward (`W`) and backward (`B`) drivers.
//! 2. [`basis`]: blockwise normalized indicator bases built on the state and on
//!    the `B` increments.
//! 3. [`solver`]: backward induction with empirical least squares
//!    ([`regression`]), Picard iterations for the implicit driver and sample-level
//!    truncation.
//!
//! [`oracle`] holds independent reference solutions (closed forms, tensor
//! quadrature of the time-discrete scheme, ideal projections) and [`harness`]
//! the configuration, convergence sweeps and rate fitting used by the CLI.

pub mod basis;
pub mod error;
pub mod grid_paths;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod regression;
pub mod solver;

pub use error::{Error, Result};
