//! Bayesian training of ReLU multilayer perceptrons: layer-wise message
//! passing coupled to a group-sparse prior inside an EM loop, plus a
//! federated simulation harness.

pub mod checkpoint;
pub mod damp;
pub mod data;
pub mod em;
pub mod error;
pub mod fed;
pub mod ftable;
pub mod gaussian;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod quadrature;

pub use error::{Error, Result};
