//! Minimal deterministic differentiable-array engine.
//!
//! Provides exactly the layers the localisation networks need (2D/1D
//! convolution, batch-norm, ReLU, sigmoid, window-2 average pooling,
//! full-extent depthwise convolution, learnable temporal weighting and
//! linear maps) plus MSE, reverse-mode gradients and Adam.
//!
//! The engine is generic over [`Scalar`]: `f32` for training and `f64` for
//! gradient-check oracles.

mod adam;
mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod scalar;

pub use adam::{AdamConfig, AdamState};
pub use array::Tensor;
pub use graph::{BatchNormConfig, Graph, RunningStats, Var};
pub use layers::{LayerHyper, LayerKind, LayerParams, Param};
pub use scalar::{Precision, Scalar};
