//! Multi-input multi-output (MIMO) subnetwork training.
//!
//! A single MLP receives `M` inputs concatenated before its first layer and
//! produces `M` output heads. Trained on independently drawn examples per
//! slot, the heads behave like an ensemble of `M` independent networks that
//! can be evaluated in one forward pass by tiling a test input `M` times.
//!
//! Modules:
//! - [`tensor`]: dense tensors and reverse-mode differentiation
//! - [`model`]: MIMO, naive multihead, standard and deep-ensemble MLPs
//! - [`data`]: synthetic generators, CSV loading and the M-tuple sampler
//! - [`training`]: the summed per-head loss, SGD, evaluation and checkpoints
//! - [`analysis`]: diversity, invariance, subnetwork separation,
//!   bias-variance decomposition, calibration and sparsity
//! - [`landscape`]: weight-space plane sections and trajectory projection
//! - [`experiment`]: replicated train/evaluate runs and parameter sweeps

pub mod analysis;
pub mod data;
pub mod experiment;
pub mod landscape;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use data::{Dataset, MimoBatch, SamplingConfig, Split};
pub use model::{build_network, Architecture, Network, NetworkConfig, Task};
pub use tensor::{Graph, NodeId, Op, Tensor};
pub use training::{evaluate, train, OptimizerConfig};
