//! Geometric extreme-value analysis of gridded daily series.
//!
//! The pipeline maps raw series to standard exponential margins, fits a
//! truncated-gamma radial model with a generalised Gaussian gauge, and
//! estimates joint-tail probabilities by extrapolating beyond the radial
//! threshold.

pub mod artifact;
pub mod cli;
pub mod deform;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod fit;
pub mod geometry;
pub mod ingest;
pub mod marginal;
pub mod optim;
pub mod pipeline;
pub mod simulate;
pub mod special;
pub mod synthetic;

pub use error::{Error, Result};
