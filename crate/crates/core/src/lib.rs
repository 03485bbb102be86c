//! Training low-latency spiking neural networks by differentiating through
//! the spike representation.
//!
//! The forward pass simulates integrate-and-fire (IF) or leaky
//! integrate-and-fire (LIF) neurons over `N` discrete time steps. Each
//! spiking layer's output train is summarised as a (weighted) firing rate,
//! and the backward pass differentiates the clamp mapping that this rate
//! approximates instead of unrolling the network through time.
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and a tape-based reverse-mode graph
//! - [`neuron`]: discretised IF/LIF dynamics with subtraction reset
//! - [`representation`]: spike-representation operators and error decomposition
//! - [`network`]: declarative architectures, time-folded batch norm, temporal forward
//! - [`engine`]: representation-level backward pass, threshold training, optimizers
//! - [`data`]: IDX / CIFAR / frame loaders, static encoding, augmentation
//! - [`analysis`]: weight quantization, firing-rate reports, sweep experiments
//! - [`checkpoint`]: binary parameter snapshots

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod network;
pub mod neuron;
pub mod representation;
pub mod tensor;

pub use error::{DsrError, Result};
pub use tensor::Tensor;
