//! Neural building blocks: GRU, bilinear attention, dense, dropout and the
//! 2D/3D convolutional visual encoders.
//!
//! Layers own no tensors. They hold [`ParamId`]s into a [`ParamSet`] and run
//! against a [`Ctx`], which maps those ids to graph nodes for one forward
//! pass. The same layer can therefore be evaluated with perturbed parameters
//! (finite differences) or with a fresh graph per batch.

mod attention;
mod conv;
mod dense;
mod dropout;
mod gru;
mod params;

pub use attention::{AttentionBlock, Attended};
pub use conv::{ConvEncoder2d, ConvEncoder3d};
pub use dense::{Activation, DenseLayer};
pub use dropout::dropout;
pub use gru::GruLayer;
pub use params::{Ctx, ParamId, ParamSet};
