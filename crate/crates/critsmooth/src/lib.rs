//! Simulation and numerical diagnostics for critical multivariate smoothing
//! transforms driven by random nonnegative matrices.

pub mod branching;
pub mod cli;
pub mod cone_geometry;
pub mod error;
pub mod model;
pub mod mrw;
pub mod rng;
pub mod smoothing;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
