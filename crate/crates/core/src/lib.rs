//! Masked-attention time-series forecaster whose predictions can be evaluated
//! on any subset of feature groups, plus exact Shapley/Owen explanations built
//! on that ability, sampling-based SHAP baselines, a synthetic benchmark with
//! ground-truth explanations, and classical forecasting baselines.

pub mod aggregate;
pub mod baselines;
pub mod error;
pub mod explainers;
pub mod model;
pub mod numkernel;
pub mod schema;
pub mod seeds;
pub mod shapley;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
