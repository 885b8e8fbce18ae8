//! Measuring how compression perturbations propagate through the embedding,
//! logit and probability spaces of a language model.

pub mod distributions;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod matrix;
pub mod propagation;
pub mod pruning;
pub mod toylm;
pub mod vecmath;

pub use error::{Error, Result};
