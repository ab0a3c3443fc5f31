//! Regridding uncertainty toolkit.
//!
//! Regrids gridded fields between mismatched grids with Gaussian-process
//! kriging and conditional simulation, then propagates the regridding
//! uncertainty through a conjugate Bayesian linear regression.

pub mod arma;
pub mod bayes;
pub mod commands;
pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
