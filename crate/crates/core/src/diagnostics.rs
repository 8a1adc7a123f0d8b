//! Finite-difference gradient checks over every layer type and every fusion
//! strategy, as one report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{
    centered_prob, ChannelBundle, FusionKind, FusionModel, ModelConfig, VisualEncoderKind, BBOX_DIM,
    POSE_DIM, SPEED_DIM,
};
use crate::layers::{
    dropout, Activation, AttentionBlock, ConvEncoder2d, ConvEncoder3d, Ctx, DenseLayer, GruLayer,
    ParamSet,
};
use crate::tensor::{finite_diff_check_named, Graph, Tensor, Var};

pub const GRADCHECK_EPS: f64 = 1e-5;
/// A component passes when its worst relative error is strictly below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSetup {
    pub seq_len: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        GradcheckSetup {
            seq_len: 4,
            feature_dim: 8,
            hidden_dim: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    /// Parameter or input coordinate where the worst error occurred.
    pub worst: Option<String>,
    pub coordinates: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Uniform `[-1, 1)` channels for `cfg`, with a one-hot driver action per
/// frame. Used by the checks and by tests that need a plausible input.
pub fn random_bundle(cfg: &ModelConfig, seed: u64) -> Result<ChannelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.seq_len;
    let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let pose = uniform(&[t, POSE_DIM])?;
    let bbox = uniform(&[t, BBOX_DIM])?;
    let local = uniform(&cfg.visual_shape())?;
    let global = if cfg.use_global_context {
        Some(uniform(&cfg.visual_shape())?)
    } else {
        None
    };
    let actions: Vec<usize> = (0..t).map(|_| rng.random_range(0..SPEED_DIM)).collect();
    let speed = Tensor::from_fn(&[t, SPEED_DIM], |i| f64::from(actions[i / SPEED_DIM] == i % SPEED_DIM))?;
    Ok(ChannelBundle {
        pose,
        bbox,
        speed,
        local,
        global,
    })
}

/// Config of the full-model check for one fusion strategy.
pub fn gradcheck_model_config(setup: &GradcheckSetup, fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        fusion,
        visual_encoder: VisualEncoderKind::Frame2dRnn,
        use_global_context: true,
        hidden_dim: setup.hidden_dim,
        feature_dim: setup.feature_dim,
        seq_len: setup.seq_len,
        ..ModelConfig::desk()
    }
}

/// Runs the layer checks followed by one full-model check per fusion
/// strategy. Layer outputs are reduced by a fixed random weighting; models
/// are checked through [`centered_prob`] of their logit.
pub fn gradcheck_suite(setup: &GradcheckSetup) -> Result<Vec<ComponentCheck>> {
    let mut out = layer_checks(setup)?;
    for fusion in FusionKind::ALL {
        out.push(model_check(setup, fusion)?);
    }
    Ok(out)
}

fn layer_checks(setup: &GradcheckSetup) -> Result<Vec<ComponentCheck>> {
    let s = setup.seed;
    let t = setup.seq_len;
    let d = setup.feature_dim;
    let h = setup.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut out = Vec::new();

    let mut ps = ParamSet::new();
    let gru = GruLayer::new(&mut ps, "gru", d, h, &mut rng)?;
    let xs = uniform(&mut rng, &[t, d])?;
    out.push(check_layer("gru", &ps, &[("xs", xs)], s, |cx, x| {
        gru.sequence(cx, x[0], None)
    })?);

    let mut ps = ParamSet::new();
    let att = AttentionBlock::new(&mut ps, "attention", h, 0.5, &mut rng)?;
    let hs = uniform(&mut rng, &[t, h])?;
    out.push(check_layer("attention", &ps, &[("hs", hs)], s, |cx, x| {
        Ok(att.attend(cx, x[0])?.output)
    })?);

    for act in [Activation::None, Activation::Sigmoid, Activation::Tanh] {
        let mut ps = ParamSet::new();
        let dense = DenseLayer::new(&mut ps, "dense", d, h, act, &mut rng)?;
        let x = uniform(&mut rng, &[t, d])?;
        let name = format!("dense ({act:?})").to_lowercase();
        out.push(check_layer(&name, &ps, &[("x", x)], s, |cx, x| dense.forward(cx, x[0]))?);
    }

    let x = uniform(&mut rng, &[t, h])?;
    let mask_seed = rng.random::<u64>();
    out.push(check_with(
        "dropout (training mask)",
        &ParamSet::new(),
        &[("x", x)],
        s,
        |g, pv, xv| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let mut cx = Ctx::train(g, pv, &mut mask_rng);
            dropout(&mut cx, xv[0], 0.5)
        },
    )?);

    let mut ps = ParamSet::new();
    let enc = ConvEncoder2d::new(&mut ps, "conv2d", 1, 2, 2, d, &mut rng)?;
    let clip = uniform(&mut rng, &[t, 8, 8, 1])?;
    out.push(check_layer("conv2d encoder", &ps, &[("clip", clip)], s, |cx, x| {
        enc.encode(cx, x[0])
    })?);

    let mut ps = ParamSet::new();
    let enc = ConvEncoder3d::for_images(&mut ps, "conv3d", 1, 2, 1, d, &mut rng)?;
    let clip = uniform(&mut rng, &[t.max(2), 8, 8, 1])?;
    out.push(check_layer("conv3d encoder (images)", &ps, &[("clip", clip)], s, |cx, x| {
        enc.encode(cx, x[0])
    })?);

    let mut ps = ParamSet::new();
    let enc = ConvEncoder3d::for_features(&mut ps, "conv3d", d, 2, 1, d, &mut rng)?;
    let seq = uniform(&mut rng, &[t.max(2), 1, 1, d])?;
    out.push(check_layer("conv3d encoder (features)", &ps, &[("seq", seq)], s, |cx, x| {
        enc.encode(cx, x[0])
    })?);

    Ok(out)
}

fn model_check(setup: &GradcheckSetup, fusion: FusionKind) -> Result<ComponentCheck> {
    let cfg = gradcheck_model_config(setup, fusion);
    let model = FusionModel::build(cfg.clone(), setup.seed)?;
    let bundle = random_bundle(&cfg, setup.seed.wrapping_add(1))?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let report = finite_diff_check_named(
        |g, vars| {
            let mut cx = Ctx::eval(g, vars);
            let out = model.forward(&mut cx, &bundle)?;
            Ok(centered_prob(cx.graph, out.logit))
        },
        model.params().tensors(),
        &names,
        GRADCHECK_EPS,
    )?;
    Ok(ComponentCheck {
        component: format!("model ({})", fusion.label()),
        max_rel_error: report.max_rel_error,
        worst: report.worst.map(|(i, j)| format!("{}[{j}]", names[i])),
        coordinates: report.coordinates,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn check_layer<F>(
    component: &str,
    ps: &ParamSet,
    inputs: &[(&str, Tensor)],
    seed: u64,
    run: F,
) -> Result<ComponentCheck>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    check_with(component, ps, inputs, seed, |g, pv, xv| {
        let mut cx = Ctx::eval(g, pv);
        run(&mut cx, xv)
    })
}

/// Checks `sum(w ⊙ run(..))` for a fixed random `w` against every parameter
/// and every extra input.
fn check_with<F>(
    component: &str,
    ps: &ParamSet,
    inputs: &[(&str, Tensor)],
    seed: u64,
    run: F,
) -> Result<ComponentCheck>
where
    F: Fn(&mut Graph, &[Var], &[Var]) -> Result<Var>,
{
    let mut tensors: Vec<Tensor> = ps.tensors().to_vec();
    let mut names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in inputs {
        tensors.push(t.clone());
        names.push(format!("input {name}"));
    }
    let n = ps.len();
    let report = finite_diff_check_named(
        |g, vars| {
            let (pv, xv) = vars.split_at(n);
            let y = run(g, pv, xv)?;
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let w = uniform(&mut wr, g.shape(y))?;
            let w = g.constant(w);
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        },
        &tensors,
        &names,
        GRADCHECK_EPS,
    )?;
    Ok(ComponentCheck {
        component: component.to_string(),
        max_rel_error: report.max_rel_error,
        worst: report.worst.map(|(i, j)| format!("{}[{j}]", names[i])),
        coordinates: report.coordinates,
    })
}
