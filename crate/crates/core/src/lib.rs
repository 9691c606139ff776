//! Regression networks trained jointly on labeled images and automatically
//! generated ranked image sets.

pub mod active;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crop;
pub mod dataset;
pub mod distortion;
pub mod experiment;
pub mod group;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ranking;
pub mod seeds;
pub mod tensor;
#[doc(hidden)]
pub mod testutil;

pub use nn::{HeadOutputs, LayerSpec, Network, NetworkSpec, Parameter, Parameters};
pub use optim::{sgd_step, SgdConfig};
pub use tensor::{Tensor, TensorError};
