//! DenseNet sea-surface-temperature emulator with a from-scratch
//! reverse-mode engine and post-hoc pixel-wise attribution.

pub mod ablation;
pub mod aggregation;
pub mod attribution;
pub mod benchmark;
pub mod data;
pub mod emulator;
pub mod error;
pub mod graph;
pub mod ops;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use emulator::{ArchConfig, LandMask, ModelParams};
pub use error::{CoreError, Result};
pub use graph::{BackwardMode, Gradients, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision emulator, the storage precision of checkpoints.
pub type Model = ModelParams<f32>;
/// Double-precision emulator, used for attribution.
pub type Model64 = ModelParams<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
