//! Bayesian generalized propensity score estimation of direct and spillover
//! effects on networks.

pub mod community;
pub mod data;
pub mod error;
pub mod estimator;
pub mod exposure;
pub mod graph;
pub mod linalg;
pub mod mcmc;
pub mod outcome;
pub mod ps;
pub mod rng;
pub mod sim;
pub mod splines;

pub use error::{Error, Result};
