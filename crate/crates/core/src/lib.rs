//! Automated search for adaptive adversarial attacks against small
//! differentiable classifiers.

pub mod attack;
pub mod dsl;
pub mod error;
pub mod graph;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
