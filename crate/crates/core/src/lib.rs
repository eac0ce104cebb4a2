//! Neural-network estimation of a regression function when the covariates
//! are observed with error.

pub mod error;
pub mod estimators;
pub mod eval;
pub mod flow;
pub mod kriging;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod priors;
pub mod rng;
pub mod simgen;
pub mod trainers;

pub use error::{Error, Result};
