//! Soft-sensing classifiers for imbalanced sensor time series, with
//! saliency-guided reweighting of the input sensors.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod saliency;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
