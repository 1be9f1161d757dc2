//! Propensity-score stratified learning under covariate shift, with
//! importance-weighting baselines, balance diagnostics, nonparametric
//! conditional density estimation and evaluation tools.

pub mod balance;
pub mod cli;
pub mod cdens;
pub mod error;
pub mod eval;
pub mod learn;
pub mod propensity;
pub mod rng;
pub mod strata;
pub mod synth;
pub mod tabular;
pub mod weights;

mod glm;
mod linalg;
pub mod neighbors;

pub use error::{Error, Result};
