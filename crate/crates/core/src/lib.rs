//! Hierarchical probabilistic forecasting for intermittent retail demand.
//!
//! The pipeline: classify series by demand pattern, train one global model
//! per class on the aggregate level, forecast recursively, split the
//! forecasts down to the lower level with historical proportions, wrap them
//! in Poisson or negative-binomial distributions, and score the resulting
//! quantiles with scaled pinball loss.

pub mod classify;
pub mod config;
pub mod dist;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbt;
pub mod linear;
pub mod runner;
pub mod series;
pub mod topdown;

pub use error::{Error, Result};
