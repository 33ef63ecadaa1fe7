//! Simulation of certifiably robust federated learning for multinomial
//! logistic regression.
//!
//! Training clips the aggregated global model to a norm bound and adds
//! Gaussian noise every round ([`engine`]). A coordinated model-replacement
//! backdoor can be injected at one round ([`attack`]). The final model is
//! smoothed by voting over Gaussian-perturbed copies of its parameters, which
//! yields a certified trigger magnitude per test sample ([`certify`]).
//! [`analysis`] holds the closed-form divergence bounds and the numerical
//! studies, [`pipeline`] wires everything to a JSON run configuration, and
//! [`report`] writes the CSV and chart artifacts.

pub mod analysis;
pub mod attack;
pub mod certify;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{CrflError, Result};
