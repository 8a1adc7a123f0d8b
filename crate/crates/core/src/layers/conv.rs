use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{Reduction, Var};

use super::dense::{Activation, DenseLayer};
use super::params::{Ctx, ParamId, ParamSet};

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
}

fn conv_stack(
    params: &mut ParamSet,
    prefix: &str,
    in_channels: usize,
    channels: usize,
    depth: usize,
    kernel: [usize; 3],
    rng: &mut dyn RngCore,
) -> Result<Vec<ConvBlock>> {
    if depth == 0 || channels == 0 || in_channels == 0 {
        return Err(Error::Config(
            "conv encoder needs depth, channels and input channels > 0".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(depth);
    let mut c_in = in_channels;
    for i in 0..depth {
        let fan_in = kernel.iter().product::<usize>() * c_in;
        let weight = params.add_uniform(
            format!("{prefix}.conv{i}.weight"),
            &[channels, kernel[0], kernel[1], kernel[2], c_in],
            fan_in,
            rng,
        )?;
        let bias = params.add_zeros(format!("{prefix}.conv{i}.bias"), &[channels])?;
        blocks.push(ConvBlock { weight, bias });
        c_in = channels;
    }
    Ok(blocks)
}

/// conv -> relu -> max-pool per block, then the mean over all remaining
/// positions of each leading index, giving `[lead, channels]`.
fn run_stack(cx: &mut Ctx, blocks: &[ConvBlock], x: Var, pool: [usize; 3]) -> Result<Var> {
    let mut x = x;
    for b in blocks {
        let (w, bias) = (cx.p(b.weight), cx.p(b.bias));
        x = cx.graph.conv3d(x, w, bias)?;
        x = cx.graph.relu(x);
        x = cx.graph.max_pool3d(x, pool)?;
    }
    Ok(x)
}

/// Per-frame 2D convolutional encoder: `[T, H, W, C] -> [T, feature_dim]`.
///
/// Each frame goes through `depth` blocks of 3x3 conv (same padding), ReLU
/// and 2x2 max pooling, then a spatial average pool and a linear map.
#[derive(Clone, Debug)]
pub struct ConvEncoder2d {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub feature_dim: usize,
    blocks: Vec<ConvBlock>,
    head: DenseLayer,
}

impl ConvEncoder2d {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        depth: usize,
        feature_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let blocks = conv_stack(params, prefix, in_channels, channels, depth, [1, 3, 3], rng)?;
        let head = DenseLayer::new(
            params,
            &format!("{prefix}.proj"),
            channels,
            feature_dim,
            Activation::None,
            rng,
        )?;
        Ok(ConvEncoder2d {
            in_channels,
            channels,
            depth,
            feature_dim,
            blocks,
            head,
        })
    }

    /// Smallest frame height/width the pooling stack accepts.
    pub fn min_extent(&self) -> usize {
        1 << self.depth
    }

    pub fn encode(&self, cx: &mut Ctx, clip: Var) -> Result<Var> {
        let (t, h, w) = match *cx.graph.shape(clip) {
            [t, h, w, c] if c == self.in_channels => (t, h, w),
            ref s => {
                return Err(Error::dim(format!(
                    "2D encoder expects [T, H, W, {}], got {s:?}",
                    self.in_channels
                )))
            }
        };
        let min = self.min_extent();
        if h < min || w < min {
            return Err(Error::dim(format!(
                "frames of {h}x{w} are too small for {} pooling stages (need {min}x{min})",
                self.depth
            )));
        }
        let x = run_stack(cx, &self.blocks, clip, [1, 2, 2])?;
        let s = cx.graph.shape(x).to_vec();
        let x = cx.graph.reshape(x, &[t, s[1] * s[2], s[3]])?;
        let pooled = cx.graph.reduce(Reduction::Mean, x, 1)?;
        self.head.forward(cx, pooled)
    }
}

/// Clip-level 3D convolutional encoder: `[T, H, W, C] -> [feature_dim]`.
///
/// Kernel and pooling extents are per axis `(time, height, width)`. Image
/// clips use 3x3x3 kernels with 2x2x2 pooling; feature sequences are viewed
/// as `[T, 1, 1, d]` clips and use 3x1x1 kernels with 2x1x1 pooling, which
/// is a temporal convolution over the feature channels.
#[derive(Clone, Debug)]
pub struct ConvEncoder3d {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    blocks: Vec<ConvBlock>,
    head: DenseLayer,
}

impl ConvEncoder3d {
    pub fn for_images(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        depth: usize,
        feature_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::new(
            params,
            prefix,
            in_channels,
            channels,
            depth,
            feature_dim,
            [3, 3, 3],
            [2, 2, 2],
            rng,
        )
    }

    pub fn for_features(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        channels: usize,
        depth: usize,
        feature_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::new(
            params,
            prefix,
            in_dim,
            channels,
            depth,
            feature_dim,
            [3, 1, 1],
            [2, 1, 1],
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        depth: usize,
        feature_dim: usize,
        kernel: [usize; 3],
        pool: [usize; 3],
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let blocks = conv_stack(params, prefix, in_channels, channels, depth, kernel, rng)?;
        let head = DenseLayer::new(
            params,
            &format!("{prefix}.proj"),
            channels,
            feature_dim,
            Activation::None,
            rng,
        )?;
        Ok(ConvEncoder3d {
            in_channels,
            channels,
            depth,
            feature_dim,
            kernel,
            pool,
            blocks,
            head,
        })
    }

    pub fn encode(&self, cx: &mut Ctx, clip: Var) -> Result<Var> {
        let dims = match *cx.graph.shape(clip) {
            [t, h, w, c] if c == self.in_channels => [t, h, w],
            ref s => {
                return Err(Error::dim(format!(
                    "3D encoder expects [T, H, W, {}], got {s:?}",
                    self.in_channels
                )))
            }
        };
        for (axis, (&n, &p)) in dims.iter().zip(&self.pool).enumerate() {
            let need = p.pow(self.depth as u32);
            if n < need {
                return Err(Error::dim(format!(
                    "clip extent {n} on axis {axis} is too small for {} pooling stages \
                     (need {need})",
                    self.depth
                )));
            }
        }
        let x = run_stack(cx, &self.blocks, clip, self.pool)?;
        let s = cx.graph.shape(x).to_vec();
        let x = cx.graph.reshape(x, &[s[0] * s[1] * s[2], s[3]])?;
        let pooled = cx.graph.reduce(Reduction::Mean, x, 0)?;
        let pooled = cx.graph.reshape(pooled, &[1, self.channels])?;
        let y = self.head.forward(cx, pooled)?;
        cx.graph.reshape(y, &[self.feature_dim])
    }
}
