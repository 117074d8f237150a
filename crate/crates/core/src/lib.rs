//! Propensity-score augmented latent factor model for staggered adoption
//! panels: Gibbs sampler, simulation harness and Monte Carlo tooling.

// NaN must fail the positivity checks, hence `!(x > 0.0)` throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod diagnostics;
pub mod dists;
pub mod engine;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod outcome;
pub mod panel;
pub mod rotation;
pub mod simulation;

pub use error::{Error, Result};
