//! Post-hoc Kronecker-factored Laplace posteriors for the second linear
//! layer of every expert in a small mixture-of-experts classifier.
//!
//! Pipeline: [`train::train`] a MAP model, [`curvature::accumulate`] low-rank
//! Kronecker factors per expert, build a [`laplace::LaplacePosterior`], tune
//! its prior precision, then draw Monte-Carlo predictives with
//! [`predictive`] and score them with [`calibration`].

pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod data;
pub mod error;
pub mod laplace;
pub mod linalg;
pub mod model;
mod parallel;
pub mod pipeline;
pub mod predictive;
pub mod repro;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
