//! Conformal-prediction tooling for evaluating and improving machine unlearning.
//!
//! The crate is organised along the evaluation pipeline:
//!
//! - [`dataset`]: seeded Gaussian-blob classification data and the six data splits
//!   (retain, forget, two disjoint calibration sets, test, leftover pool).
//! - [`model`]: a one-hidden-layer tanh MLP with explicit backprop and SGD.
//! - [`conformal`]: split conformal prediction (scores, threshold, prediction sets).
//! - [`metrics`]: UA/RA/TA, Coverage, Set Size, CR, recovery analysis, gap to retrain.
//! - [`mia`]: confidence-feature membership inference and the conformal MIACR metric.
//! - [`unlearn`]: five baseline unlearning methods plus the conformal unlearning loss.
//! - [`pipeline`]: end-to-end orchestration used by the CLI and the acceptance suite.

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod unlearn;

mod csvio;

pub use error::{Error, Result};
