//! Multimodal spatio-temporal sequence classification for pedestrian
//! crossing-intention prediction.
//!
//! Five per-pedestrian channels (pose keypoints, bounding box trajectory,
//! ego-vehicle action, local appearance context and global scene context)
//! are encoded by GRU stacks and bilinear attention, then fused under one of
//! four strategies (hybrid, later, early, hierarchical). Everything runs on a
//! small double-precision reverse-mode autodiff engine in [`tensor`].

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
