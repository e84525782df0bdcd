//! Numerical laboratory for rough differential equations driven by
//! fractional Brownian motion.
//!
//! The crate samples fBm exactly on uniform grids, solves the driven
//! equation together with its Jacobian flow along piecewise-linear drives,
//! assembles Malliavin matrices through the step-function Gram form of the
//! Cameron–Martin space, checks Hörmander-type bracket conditions, computes
//! Varadhan rate functions by constrained optimal control, and compares
//! them with Monte Carlo estimates of `ε² log p_ε(y)`.

pub mod cli;
pub mod config;
pub mod density;
pub mod driver;
pub mod error;
pub mod expr;
pub mod fields;
pub mod flow;
pub mod malliavin;
pub mod optim;
pub mod rate;
pub mod hilbert;
pub mod jet;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
