//! Federated learning simulator with ordered layer freezing.
//!
//! Resource-constrained clients freeze the lowest `l_k` layers of the global
//! model before local training, so those layers neither store activations nor
//! receive gradients. The server may sparsify the frozen stack before sending
//! it (see [`toa`]) and aggregates each layer over the clients that trained it.

pub mod cli;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod nn;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod toa;

pub use error::{Error, Result};
pub use tensor::Tensor;
