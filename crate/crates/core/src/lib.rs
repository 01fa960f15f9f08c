//! Multi-site normative modelling: pooled, per-batch and hierarchical
//! Bayesian regression fitted with NUTS, deviation scoring, hyperprior
//! transfer to unseen sites, and a ComBat baseline.

pub mod archive;
pub mod combat;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod inference;
pub mod math;
pub mod models;
pub mod scalar;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};

/// Posterior draws in double precision.
pub type Draws = inference::PosteriorDraws<f64>;
/// Posterior draws in single precision.
pub type Draws32 = inference::PosteriorDraws<f32>;
