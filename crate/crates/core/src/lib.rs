//! Counterfactual outcome tensors for longitudinal treatment regimes:
//! panel handling, inverse-probability weights, sieve-constrained Tucker
//! completion and the estimands built on the completed tensor.

pub mod completion;
pub mod error;
pub mod estimands;
pub mod linalg;
pub mod metrics;
pub mod panel;
pub mod pipeline;
pub mod propensity;
pub mod rng;
pub mod sieve;
pub mod simbench;
pub mod tensor;

pub use error::{Error, Result};
