//! Cell-level outlier detection and repair for mixed-type tabular data.
//!
//! The crate is organised as a pipeline:
//!
//! - [`data`]: schema, CSV loading, standardization and categorical encodings.
//! - [`nn`]: a small dense-network engine with reverse-mode gradients and Adam.
//! - [`generative`]: per-feature likelihoods, outlier components, ELBOs and the
//!   closed-form coordinate update for the cell gates.
//! - [`training`]: mini-batch training for the plain VAE and the robust
//!   variants (coordinate-ascent and amortized gates), plus checkpoints.
//! - [`scoring`] and [`repair`]: outlier scores and cell repair (MAP and
//!   pseudo-Gibbs).
//! - [`corruption`]: seeded ground-truth noise injection.
//! - [`evaluation`]: average precision, SMSE and Brier metrics.
//! - [`baselines`]: the per-feature marginal-distribution baseline.

pub mod baselines;
pub mod checkpoint;
pub mod corruption;
pub mod data;
mod error;
pub mod evaluation;
pub mod generative;
pub mod nn;
pub mod repair;
pub mod scoring;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
