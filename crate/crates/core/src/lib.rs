//! Budgeted visual active search on gridded scenes.

pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod predictor;
pub mod searcher;
pub mod taskdata;
pub mod tensor;
pub mod trainer;

pub use error::{Result, VasError};
