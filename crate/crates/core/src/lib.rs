//! Single-process simulator for federated training in which the leading
//! ("base") layers of a dense network are averaged across clients while the
//! trailing ("personalization") layers never leave the client that owns them.
//!
//! Setting the number of personalization layers to zero recovers plain
//! federated averaging; [`fedavg`] carries an independent implementation of
//! that baseline so the two paths can be checked against each other.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fedavg;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod seed;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{Activation, LayerSpec, LayerWeights, Sample, SgdConfig, WeightSet};
pub use split::{ModelSpec, PartitionedWeights};
pub use tensor::Tensor;
