//! Probabilistic forecasting of nonlinear dynamical systems.
//!
//! Two model families are provided, each with an explicit data-generating
//! model so that forecasts come with predictive intervals:
//!
//! * [`ppgp`]: the parallel partial Gaussian process emulator of a one-step
//!   (or derivative) transition function, with Student-t predictive
//!   distributions and chain sampling for multi-step forecasts.
//! * [`dmd`]: exact DMD, higher-order DMD and extended DMD, read as maximum
//!   likelihood estimators of a linear Gaussian state-space model, with the
//!   resulting Gaussian forecast posterior.
//!
//! [`stochastics`] holds the samplers, RK4 and the Lorenz 96 generator,
//! [`metrics`] the forecast scores, and [`io`] the file formats used by the
//! `dynuq` command-line tool.

pub mod cli;
pub mod dmd;
mod error;
pub mod forecast;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod ppgp;
pub mod stochastics;

pub use error::{Error, Result};
pub use forecast::ForecastResult;
pub use kernels::{InputMatrix, KernelFamily, KernelSpec, KernelStructure};
pub use stochastics::RngStream;

/// m×n matrix of observed output vectors, one column per time point.
pub type SnapshotMatrix = nalgebra::DMatrix<f64>;
