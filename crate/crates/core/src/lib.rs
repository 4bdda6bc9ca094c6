//! Batch MMA polymerization reactor: nonlinear plant model, trajectory
//! linearization, modified dynamic matrix control with scheduled model
//! switching, and a closed-loop simulation harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dmc;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod kinetics;
pub mod linmodel;
pub mod scheduler;

pub use error::{Error, Result};
