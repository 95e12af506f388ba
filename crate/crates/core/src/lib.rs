//! Laboratory for class-aware adversarial transferability.

pub mod attack;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod nonrobust;
pub mod scalar;
pub mod tensor;
pub mod theory;

pub use error::{LabError, Result};
pub use scalar::Scalar;

/// Tensor of the laboratory's working precision.
pub type Tensor = tensor::Tensor<f64>;
/// Classifier in the laboratory's working precision.
pub type Network = nn::Network<f64>;
/// Labeled dataset in the laboratory's working precision.
pub type Dataset = data::Dataset<f64>;
