//! Simulation and estimation toolkit for non-autonomous slow–fast stochastic
//! systems: coupled Euler–Maruyama integration, evolution systems of invariant
//! measures of the frozen fast process, averaged and homogenized coefficients,
//! a Feynman–Kac Poisson solver, deviation limits and convergence-rate sweeps.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod deviation;
pub mod error;
pub mod frozen;
pub mod harness;
pub mod noise;
pub mod poisson;
pub mod rate;
pub mod sde;
pub mod stats;
pub mod system;

pub use error::{Error, Result};
