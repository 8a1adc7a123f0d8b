use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, AttentionBlock, ConvEncoder2d, ConvEncoder3d, Ctx, DenseLayer, GruLayer, ParamId,
    ParamSet,
};
use crate::tensor::{Graph, Tensor, Var};

use super::config::{
    FusionKind, ModelConfig, VisualEncoderKind, VisualInput, BBOX_DIM, POSE_DIM, SPEED_DIM,
};

/// The five input channels of one observation window, already normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBundle {
    /// `[T, 36]`
    pub pose: Tensor,
    /// `[T, 4]`
    pub bbox: Tensor,
    /// `[T, 5]` one-hot driver action.
    pub speed: Tensor,
    /// `[T, d]` features or `[T, H, W, C]` images.
    pub local: Tensor,
    /// Same shape family as `local`; may be absent when the model ignores it.
    pub global: Option<Tensor>,
}

impl ChannelBundle {
    pub fn seq_len(&self) -> usize {
        self.pose.shape()[0]
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, 1]` crossing probability.
    pub prob: Var,
    /// `[1, 1]` head pre-activation, `prob = sigmoid(logit)`.
    pub logit: Var,
    /// `[1, hidden]` vectors entering the final modality attention, in
    /// stacking order (hybrid and later fusion only).
    pub modality_vectors: Vec<Var>,
    /// `[1, k]` weights of the modality attention (hybrid and later only).
    pub modality_weights: Option<Var>,
}

/// `prob - 1/2`, evaluated as `tanh(logit / 2) / 2`.
///
/// Same gradient as the probability, but without the rounding that storing a
/// value near 1/2 costs; finite-difference checks use it as their scalar.
pub fn centered_prob(g: &mut Graph, logit: Var) -> Var {
    let half = g.scale(logit, 0.5);
    let t = g.tanh(half);
    g.scale(t, 0.5)
}

/// Structural counts, mostly for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSummary {
    pub gru_layers: usize,
    pub attention_blocks: usize,
    /// Visual channels with their own summarizing branch.
    pub visual_branches: usize,
    /// Stacked GRUs along the main fusion path (hybrid: non-visual branch).
    pub fusion_stack_depth: usize,
    pub modality_vectors: usize,
}

/// How a raw visual channel becomes features.
#[derive(Clone, Debug)]
enum Stem {
    /// Input rows already are per-frame features.
    Direct,
    Frame2d(ConvEncoder2d),
    Clip(ConvEncoder3d),
}

enum StemOut {
    /// `[T, feature_dim]`
    Sequence(Var),
    /// `[1, feature_dim]`
    Clip(Var),
}

impl Stem {
    fn build(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let p = format!("{prefix}.encoder");
        Ok(match (cfg.visual_encoder, cfg.visual_input) {
            (VisualEncoderKind::Clip3d, VisualInput::Features) => {
                Stem::Clip(ConvEncoder3d::for_features(
                    params,
                    &p,
                    cfg.feature_dim,
                    cfg.conv_channels,
                    cfg.conv_depth,
                    cfg.feature_dim,
                    rng,
                )?)
            }
            (VisualEncoderKind::Clip3d, VisualInput::Images { channels, .. }) => {
                Stem::Clip(ConvEncoder3d::for_images(
                    params,
                    &p,
                    channels,
                    cfg.conv_channels,
                    cfg.conv_depth,
                    cfg.feature_dim,
                    rng,
                )?)
            }
            (_, VisualInput::Images { channels, .. }) => Stem::Frame2d(ConvEncoder2d::new(
                params,
                &p,
                channels,
                cfg.conv_channels,
                cfg.conv_depth,
                cfg.feature_dim,
                rng,
            )?),
            (_, VisualInput::Features) => Stem::Direct,
        })
    }

    fn run(&self, cx: &mut Ctx, clip: &Tensor) -> Result<StemOut> {
        let x = cx.graph.constant(clip.clone());
        Ok(match self {
            Stem::Direct => StemOut::Sequence(x),
            Stem::Frame2d(enc) => StemOut::Sequence(enc.encode(cx, x)?),
            Stem::Clip(enc) => {
                let x = match *cx.graph.shape(x) {
                    [t, d] => cx.graph.reshape(x, &[t, 1, 1, d])?,
                    _ => x,
                };
                let v = enc.encode(cx, x)?;
                let d = enc.feature_dim;
                StemOut::Clip(cx.graph.reshape(v, &[1, d])?)
            }
        })
    }

    /// Per-timestep features; clip vectors are repeated over all `steps`.
    fn sequence(&self, cx: &mut Ctx, clip: &Tensor, steps: usize) -> Result<Var> {
        match self.run(cx, clip)? {
            StemOut::Sequence(s) => Ok(s),
            StemOut::Clip(v) => {
                let ones = cx.ones_col(steps);
                cx.graph.matmul(ones, v)
            }
        }
    }
}

/// Visual channel reduced to a single `[1, hidden]` modality vector.
#[derive(Clone, Debug)]
struct VisualBranch {
    stem: Stem,
    gru: Option<GruLayer>,
    attention: Option<AttentionBlock>,
    proj: Option<DenseLayer>,
}

impl VisualBranch {
    fn build(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stem = Stem::build(params, prefix, cfg, rng)?;
        let (h, d) = (cfg.hidden_dim, cfg.feature_dim);
        if matches!(stem, Stem::Clip(_)) {
            let proj = DenseLayer::new(params, &format!("{prefix}.proj"), d, h, Activation::Tanh, rng)?;
            return Ok(VisualBranch {
                stem,
                gru: None,
                attention: None,
                proj: Some(proj),
            });
        }
        let gru = GruLayer::new(params, &format!("{prefix}.gru"), d, h, rng)?;
        let att =
            AttentionBlock::new(params, &format!("{prefix}.att"), h, cfg.dropout_rate, rng)?;
        Ok(VisualBranch {
            stem,
            gru: Some(gru),
            attention: Some(att),
            proj: None,
        })
    }

    fn summarize(&self, cx: &mut Ctx, clip: &Tensor) -> Result<Var> {
        match (self.stem.run(cx, clip)?, &self.gru, &self.attention, &self.proj) {
            (StemOut::Sequence(s), Some(gru), Some(att), _) => {
                let hs = gru.sequence(cx, s, None)?;
                Ok(att.attend(cx, hs)?.output)
            }
            (StemOut::Clip(v), _, _, Some(proj)) => proj.forward(cx, v),
            _ => unreachable!("branch layout is fixed at build time"),
        }
    }

    fn gru_count(&self) -> usize {
        usize::from(self.gru.is_some())
    }

    fn attention_count(&self) -> usize {
        usize::from(self.attention.is_some())
    }
}

/// Non-visual channel encoded by its own GRU and attention (later fusion).
#[derive(Clone, Debug)]
struct SequenceBranch {
    gru: GruLayer,
    attention: AttentionBlock,
}

impl SequenceBranch {
    fn build(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(SequenceBranch {
            gru: GruLayer::new(params, &format!("{prefix}.gru"), input_dim, cfg.hidden_dim, rng)?,
            attention: AttentionBlock::new(
                params,
                &format!("{prefix}.att"),
                cfg.hidden_dim,
                cfg.dropout_rate,
                rng,
            )?,
        })
    }

    fn summarize(&self, cx: &mut Ctx, x: &Tensor) -> Result<Var> {
        let x = cx.graph.constant(x.clone());
        let hs = self.gru.sequence(cx, x, None)?;
        Ok(self.attention.attend(cx, hs)?.output)
    }
}

fn global_of(bundle: &ChannelBundle) -> &Tensor {
    bundle.global.as_ref().expect("checked by check_bundle")
}

#[derive(Clone, Debug)]
enum Arch {
    Hybrid {
        /// pose, then + bbox, then + speed
        stages: [GruLayer; 3],
        non_visual_att: AttentionBlock,
        local: VisualBranch,
        global: Option<VisualBranch>,
        modality_att: AttentionBlock,
    },
    Later {
        local: VisualBranch,
        global: Option<VisualBranch>,
        pose: SequenceBranch,
        bbox: SequenceBranch,
        speed: SequenceBranch,
        modality_att: AttentionBlock,
    },
    Early {
        local: Stem,
        global: Option<Stem>,
        gru: GruLayer,
        attention: AttentionBlock,
    },
    Hierarchical {
        local: Stem,
        global: Option<Stem>,
        /// local, [global], pose, bbox, speed
        stages: Vec<GruLayer>,
        attention: AttentionBlock,
    },
}

/// A parameterized fusion model for one [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamSet,
    arch: Arch,
    head: DenseLayer,
}

impl FusionModel {
    /// Builds the architecture selected by `config` with parameters drawn
    /// from `seed`. Parameter names, order and shapes depend only on `config`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (h, d) = (cfg.hidden_dim, cfg.feature_dim);
        let drop = cfg.dropout_rate;
        let arch = match cfg.fusion {
            FusionKind::Hybrid => {
                let stages = [
                    GruLayer::new(&mut ps, "nonvisual.gru1", POSE_DIM, h, &mut rng)?,
                    GruLayer::new(&mut ps, "nonvisual.gru2", h + BBOX_DIM, h, &mut rng)?,
                    GruLayer::new(&mut ps, "nonvisual.gru3", h + SPEED_DIM, h, &mut rng)?,
                ];
                let non_visual_att = AttentionBlock::new(&mut ps, "nonvisual.att", h, drop, &mut rng)?;
                let local = VisualBranch::build(&mut ps, "local", cfg, &mut rng)?;
                let global = cfg
                    .use_global_context
                    .then(|| VisualBranch::build(&mut ps, "global", cfg, &mut rng))
                    .transpose()?;
                let modality_att = AttentionBlock::new(&mut ps, "fusion.att", h, drop, &mut rng)?;
                Arch::Hybrid {
                    stages,
                    non_visual_att,
                    local,
                    global,
                    modality_att,
                }
            }
            FusionKind::Later => {
                let local = VisualBranch::build(&mut ps, "local", cfg, &mut rng)?;
                let global = cfg
                    .use_global_context
                    .then(|| VisualBranch::build(&mut ps, "global", cfg, &mut rng))
                    .transpose()?;
                let pose = SequenceBranch::build(&mut ps, "pose", POSE_DIM, cfg, &mut rng)?;
                let bbox = SequenceBranch::build(&mut ps, "bbox", BBOX_DIM, cfg, &mut rng)?;
                let speed = SequenceBranch::build(&mut ps, "speed", SPEED_DIM, cfg, &mut rng)?;
                let modality_att = AttentionBlock::new(&mut ps, "fusion.att", h, drop, &mut rng)?;
                Arch::Later {
                    local,
                    global,
                    pose,
                    bbox,
                    speed,
                    modality_att,
                }
            }
            FusionKind::Early => {
                let local = Stem::build(&mut ps, "local", cfg, &mut rng)?;
                let global = cfg
                    .use_global_context
                    .then(|| Stem::build(&mut ps, "global", cfg, &mut rng))
                    .transpose()?;
                let visual = d * (1 + usize::from(global.is_some()));
                let width = POSE_DIM + BBOX_DIM + SPEED_DIM + visual;
                let gru = GruLayer::new(&mut ps, "early.gru", width, h, &mut rng)?;
                let attention = AttentionBlock::new(&mut ps, "early.att", h, drop, &mut rng)?;
                Arch::Early {
                    local,
                    global,
                    gru,
                    attention,
                }
            }
            FusionKind::Hierarchical => {
                let local = Stem::build(&mut ps, "local", cfg, &mut rng)?;
                let global = cfg
                    .use_global_context
                    .then(|| Stem::build(&mut ps, "global", cfg, &mut rng))
                    .transpose()?;
                let mut widths = vec![d];
                if global.is_some() {
                    widths.push(h + d);
                }
                widths.extend([h + POSE_DIM, h + BBOX_DIM, h + SPEED_DIM]);
                let stages = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        GruLayer::new(&mut ps, &format!("hier.gru{}", i + 1), w, h, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let attention = AttentionBlock::new(&mut ps, "hier.att", h, drop, &mut rng)?;
                Arch::Hierarchical {
                    local,
                    global,
                    stages,
                    attention,
                }
            }
        };
        let head = DenseLayer::new(&mut ps, "head", h, 1, Activation::None, &mut rng)?;
        Ok(FusionModel {
            config,
            params: ps,
            arch,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Weight matrix of the final fully connected layer.
    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    pub fn summary(&self) -> ArchSummary {
        match &self.arch {
            Arch::Hybrid { local, global, .. } => {
                let visual: Vec<&VisualBranch> = std::iter::once(local).chain(global).collect();
                ArchSummary {
                    gru_layers: 3 + visual.iter().map(|b| b.gru_count()).sum::<usize>(),
                    attention_blocks: 2 + visual.iter().map(|b| b.attention_count()).sum::<usize>(),
                    visual_branches: visual.len(),
                    fusion_stack_depth: 3,
                    modality_vectors: visual.len() + 1,
                }
            }
            Arch::Later { local, global, .. } => {
                let visual: Vec<&VisualBranch> = std::iter::once(local).chain(global).collect();
                ArchSummary {
                    gru_layers: 3 + visual.iter().map(|b| b.gru_count()).sum::<usize>(),
                    attention_blocks: 4 + visual.iter().map(|b| b.attention_count()).sum::<usize>(),
                    visual_branches: visual.len(),
                    fusion_stack_depth: 1,
                    modality_vectors: visual.len() + 3,
                }
            }
            Arch::Early { .. } => ArchSummary {
                gru_layers: 1,
                attention_blocks: 1,
                visual_branches: 0,
                fusion_stack_depth: 1,
                modality_vectors: 0,
            },
            Arch::Hierarchical { stages, .. } => ArchSummary {
                gru_layers: stages.len(),
                attention_blocks: 1,
                visual_branches: 0,
                fusion_stack_depth: stages.len(),
                modality_vectors: 0,
            },
        }
    }

    /// Checks that `bundle` matches this model's configuration.
    pub fn check_bundle(&self, bundle: &ChannelBundle) -> Result<()> {
        let t = self.config.seq_len;
        let expect = |name: &str, got: &Tensor, want: &[usize]| -> Result<()> {
            if got.shape() != want {
                return Err(Error::Input(format!(
                    "{name} channel has shape {:?}, model expects {want:?}",
                    got.shape()
                )));
            }
            Ok(())
        };
        expect("pose", &bundle.pose, &[t, POSE_DIM])?;
        expect("bbox", &bundle.bbox, &[t, BBOX_DIM])?;
        expect("speed", &bundle.speed, &[t, SPEED_DIM])?;
        let visual = self.config.visual_shape();
        expect("local", &bundle.local, &visual)?;
        if self.config.use_global_context {
            let g = bundle.global.as_ref().ok_or_else(|| {
                Error::Input("model uses global context but the bundle has none".into())
            })?;
            expect("global", g, &visual)?;
        }
        Ok(())
    }

    /// Records the forward pass of one sample on `cx`.
    pub fn forward(&self, cx: &mut Ctx, bundle: &ChannelBundle) -> Result<ForwardOutput> {
        self.check_bundle(bundle)?;
        let steps = self.config.seq_len;
        let (fused, modality_vectors, modality_weights) = match &self.arch {
            Arch::Hybrid {
                stages,
                non_visual_att,
                local,
                global: global_branch,
                modality_att,
            } => {
                let pose = cx.graph.constant(bundle.pose.clone());
                let bbox = cx.graph.constant(bundle.bbox.clone());
                let speed = cx.graph.constant(bundle.speed.clone());
                let hs = stages[0].sequence(cx, pose, None)?;
                let x = cx.graph.concat(&[hs, bbox], 1)?;
                let hs = stages[1].sequence(cx, x, None)?;
                let x = cx.graph.concat(&[hs, speed], 1)?;
                let hs = stages[2].sequence(cx, x, None)?;
                let non_visual = non_visual_att.attend(cx, hs)?.output;

                let mut vectors = vec![local.summarize(cx, &bundle.local)?];
                if let Some(b) = global_branch {
                    vectors.push(b.summarize(cx, global_of(bundle))?);
                }
                // the deepest-fused vector goes last so it acts as the query
                vectors.push(non_visual);
                let stacked = cx.graph.concat(&vectors, 0)?;
                let att = modality_att.attend(cx, stacked)?;
                (att.output, vectors, Some(att.weights))
            }
            Arch::Later {
                local,
                global: global_branch,
                pose,
                bbox,
                speed,
                modality_att,
            } => {
                let mut vectors = vec![local.summarize(cx, &bundle.local)?];
                if let Some(b) = global_branch {
                    vectors.push(b.summarize(cx, global_of(bundle))?);
                }
                vectors.push(pose.summarize(cx, &bundle.pose)?);
                vectors.push(bbox.summarize(cx, &bundle.bbox)?);
                vectors.push(speed.summarize(cx, &bundle.speed)?);
                let stacked = cx.graph.concat(&vectors, 0)?;
                let att = modality_att.attend(cx, stacked)?;
                (att.output, vectors, Some(att.weights))
            }
            Arch::Early {
                local,
                global: global_stem,
                gru,
                attention,
            } => {
                let mut parts = vec![
                    cx.graph.constant(bundle.pose.clone()),
                    cx.graph.constant(bundle.bbox.clone()),
                    cx.graph.constant(bundle.speed.clone()),
                    local.sequence(cx, &bundle.local, steps)?,
                ];
                if let Some(s) = global_stem {
                    parts.push(s.sequence(cx, global_of(bundle), steps)?);
                }
                let x = cx.graph.concat(&parts, 1)?;
                let hs = gru.sequence(cx, x, None)?;
                (attention.attend(cx, hs)?.output, Vec::new(), None)
            }
            Arch::Hierarchical {
                local,
                global: global_stem,
                stages,
                attention,
            } => {
                let mut inputs = Vec::with_capacity(4);
                if let Some(s) = global_stem {
                    inputs.push(s.sequence(cx, global_of(bundle), steps)?);
                }
                inputs.push(cx.graph.constant(bundle.pose.clone()));
                inputs.push(cx.graph.constant(bundle.bbox.clone()));
                inputs.push(cx.graph.constant(bundle.speed.clone()));

                let first = local.sequence(cx, &bundle.local, steps)?;
                let mut hs = stages[0].sequence(cx, first, None)?;
                for (stage, x) in stages[1..].iter().zip(inputs) {
                    let joined = cx.graph.concat(&[hs, x], 1)?;
                    hs = stage.sequence(cx, joined, None)?;
                }
                (attention.attend(cx, hs)?.output, Vec::new(), None)
            }
        };
        let logit = self.head.forward(cx, fused)?;
        let prob = cx.graph.sigmoid(logit);
        Ok(ForwardOutput {
            prob,
            logit,
            modality_vectors,
            modality_weights,
        })
    }

    /// Evaluation-mode probability for one sample.
    pub fn predict(&self, bundle: &ChannelBundle) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let mut cx = Ctx::eval(&mut g, &vars);
        let out = self.forward(&mut cx, bundle)?;
        g.item(out.prob)
    }

    /// Evaluation-mode probabilities, one graph per sample.
    pub fn predict_batch<'b>(
        &self,
        bundles: impl IntoIterator<Item = &'b ChannelBundle>,
    ) -> Result<Vec<f64>> {
        bundles.into_iter().map(|b| self.predict(b)).collect()
    }
}
