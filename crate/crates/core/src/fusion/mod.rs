//! The four fusion architectures and the named ablation grid.

mod config;
mod grid;
mod model;

pub use config::{
    FusionKind, ModelConfig, VisualEncoderKind, VisualInput, BBOX_DIM, NON_VISUAL_DIM, POSE_DIM,
    SPEED_DIM,
};
pub use grid::{resolve_variant, variant_grid, variant_grid_from, variant_names, Variant};
pub use model::{centered_prob, ArchSummary, ChannelBundle, ForwardOutput, FusionModel};
