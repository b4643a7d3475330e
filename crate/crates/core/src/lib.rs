//! Channel pruning for small convolutional networks driven by an analytic
//! estimate of the feature shift each removed channel causes downstream.

pub mod data;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod harness;
pub mod infer;
pub mod io;
pub mod ops;
pub mod pruner;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use graph::ModelGraph;
pub use tensor::Tensor;
