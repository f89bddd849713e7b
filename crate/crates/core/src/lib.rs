//! Growth mixture models with time-invariant covariates and a time-varying
//! covariate decomposed into a trait feature (its latent baseline) and state
//! features (interval-specific slopes or changes).
//!
//! The crate covers model vocabulary ([`model`]), exact model-implied moments
//! ([`moments`]), full-information maximum likelihood with logistic gating
//! ([`estimation`]), posterior classification and agreement
//! ([`classification`]), data generation and Monte Carlo metrics
//! ([`simulation`]), and dataset I/O ([`data`]).

pub mod classification;
pub mod data;
pub mod error;
pub mod estimation;
pub mod model;
pub mod moments;
pub mod report;
pub mod simulation;

pub use error::{Error, Result};
