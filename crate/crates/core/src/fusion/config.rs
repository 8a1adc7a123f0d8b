use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a pose row: 18 keypoints as (x, y).
pub const POSE_DIM: usize = 36;
/// Bounding box `(x_top, y_top, x_bottom, y_bottom)`.
pub const BBOX_DIM: usize = 4;
/// One-hot driver action: stopped, slow, fast, decelerating, accelerating.
pub const SPEED_DIM: usize = 5;
/// Width of all non-visual channels together.
pub const NON_VISUAL_DIM: usize = POSE_DIM + BBOX_DIM + SPEED_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Hybrid,
    Later,
    Early,
    Hierarchical,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Hybrid,
        FusionKind::Later,
        FusionKind::Early,
        FusionKind::Hierarchical,
    ];

    /// Column label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Hybrid => "hybrid-fusion",
            FusionKind::Later => "later-fusion",
            FusionKind::Early => "early-fusion",
            FusionKind::Hierarchical => "hierarchical-fusion",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_end_matches("-fusion") {
            "hybrid" => Ok(FusionKind::Hybrid),
            "later" | "late" => Ok(FusionKind::Later),
            "early" => Ok(FusionKind::Early),
            "hierarchical" | "hier" => Ok(FusionKind::Hierarchical),
            _ => Err(Error::Config(format!("unknown fusion strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualEncoderKind {
    /// Per-frame 2D CNN features followed by a GRU over time.
    Frame2dRnn,
    /// One clip-level 3D CNN feature vector, no temporal recurrence.
    Clip3d,
    /// Externally computed per-frame features followed by a GRU.
    Precomputed,
}

impl VisualEncoderKind {
    /// Column label used in result tables. The per-frame CNN + GRU encoder
    /// fills the role the reference tables call "VGG + GRU".
    pub fn label(self) -> &'static str {
        match self {
            VisualEncoderKind::Frame2dRnn => "VGG + GRU",
            VisualEncoderKind::Clip3d => "3D CNN",
            VisualEncoderKind::Precomputed => "features + GRU",
        }
    }
}

impl std::str::FromStr for VisualEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame2d_rnn" | "frame2d" | "2d" => Ok(VisualEncoderKind::Frame2dRnn),
            "clip3d" | "3d" => Ok(VisualEncoderKind::Clip3d),
            "precomputed" => Ok(VisualEncoderKind::Precomputed),
            _ => Err(Error::Config(format!("unknown visual encoder {s:?}"))),
        }
    }
}

/// What the local and global context channels contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisualInput {
    /// `[T, feature_dim]` per-frame feature rows.
    Features,
    /// `[T, height, width, channels]` image clips.
    Images {
        height: usize,
        width: usize,
        channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    pub visual_encoder: VisualEncoderKind,
    pub use_global_context: bool,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub seq_len: usize,
    pub dropout_rate: f64,
    pub visual_input: VisualInput,
    /// Channels of every convolution in the visual encoders.
    pub conv_channels: usize,
    /// Number of conv/pool blocks in the visual encoders.
    pub conv_depth: usize,
}

impl Default for ModelConfig {
    /// Full-scale proposed model: hybrid fusion, 2D CNN + GRU, global context,
    /// 256 hidden units over 16 frames of 512-wide features.
    fn default() -> Self {
        ModelConfig {
            fusion: FusionKind::Hybrid,
            visual_encoder: VisualEncoderKind::Frame2dRnn,
            use_global_context: true,
            hidden_dim: 256,
            feature_dim: 512,
            seq_len: 16,
            dropout_rate: 0.5,
            visual_input: VisualInput::Features,
            conv_channels: 8,
            conv_depth: 2,
        }
    }
}

impl ModelConfig {
    /// Small dimensions that train from scratch in seconds.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_dim: 16,
            feature_dim: 32,
            conv_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "hidden_dim, feature_dim and seq_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let uses_conv = match (self.visual_encoder, self.visual_input) {
            (VisualEncoderKind::Precomputed, VisualInput::Images { .. }) => {
                return Err(Error::Config(
                    "precomputed visual encoder cannot consume image clips".into(),
                ))
            }
            (VisualEncoderKind::Clip3d, _) | (_, VisualInput::Images { .. }) => true,
            _ => false,
        };
        if uses_conv && (self.conv_channels == 0 || self.conv_depth == 0) {
            return Err(Error::Config("conv_channels and conv_depth must be positive".into()));
        }
        let reach = 1usize << self.conv_depth.min(usize::BITS as usize - 1);
        if let VisualInput::Images {
            height,
            width,
            channels,
        } = self.visual_input
        {
            if channels == 0 || height < reach || width < reach {
                return Err(Error::Config(format!(
                    "{height}x{width}x{channels} frames cannot pass {} pooling stages",
                    self.conv_depth
                )));
            }
        }
        if self.visual_encoder == VisualEncoderKind::Clip3d && self.seq_len < reach {
            return Err(Error::Config(format!(
                "seq_len {} cannot pass {} temporal pooling stages",
                self.seq_len, self.conv_depth
            )));
        }
        Ok(())
    }

    /// Shape of one local or global context clip.
    pub fn visual_shape(&self) -> Vec<usize> {
        match self.visual_input {
            VisualInput::Features => vec![self.seq_len, self.feature_dim],
            VisualInput::Images {
                height,
                width,
                channels,
            } => vec![self.seq_len, height, width, channels],
        }
    }
}
