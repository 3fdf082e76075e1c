//! Bayesian state-space model for a real-valued series driven by a latent
//! circular process.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anneal;
pub mod circular;
pub mod cli;
pub mod config;
pub mod error;
pub mod forecast;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod quadrature;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
