//! Truncated EM for discrete-latent generative models, with the E-step
//! restricted per data point to a selected subset of latent states.
//! Selection is driven either by hand-crafted affinities (cosine,
//! singleton likelihood) or by an adaptive Gaussian-process affinity
//! learned across EM iterations ("GP-select").

pub mod error;
pub mod gp;
pub mod kernel;
pub mod matio;
pub mod models;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
