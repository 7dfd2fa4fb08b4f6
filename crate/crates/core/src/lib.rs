//! A small laboratory for lifelong multi-domain metric depth learning.
//!
//! The crate trains a shared convolutional encoder with per-domain predictor
//! heads on procedurally generated RGB/depth scenes, preserves knowledge of
//! earlier domains through distillation and replay, and routes inference-time
//! images to the right head by nearest mean feature.

pub mod data;
pub mod format;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod tensor;
pub mod trainer;

pub use graph::{Graph, GraphError, NodeId};
pub use tensor::{Tensor, TensorError};
