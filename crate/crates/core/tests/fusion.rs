use crossing_core::fusion::{
    centered_prob, variant_grid_from, ChannelBundle, FusionKind, FusionModel, ModelConfig, VisualEncoderKind,
    VisualInput,
};
use crossing_core::layers::Ctx;
use crossing_core::tensor::finite_diff_check;
use crossing_core::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn bundle(cfg: &ModelConfig, seed: u64) -> ChannelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.seq_len;
    let speed = Tensor::from_fn(&[t, 5], |i| f64::from(i % 5 == (i / 5) % 5)).unwrap();
    ChannelBundle {
        pose: random(&mut rng, &[t, 36]),
        bbox: random(&mut rng, &[t, 4]),
        speed,
        local: random(&mut rng, &cfg.visual_shape()),
        global: Some(random(&mut rng, &cfg.visual_shape())),
    }
}

fn small(fusion: FusionKind, encoder: VisualEncoderKind, global: bool) -> ModelConfig {
    ModelConfig {
        fusion,
        visual_encoder: encoder,
        use_global_context: global,
        hidden_dim: 8,
        feature_dim: 8,
        seq_len: 4,
        ..ModelConfig::desk()
    }
}

fn all_small_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for fusion in FusionKind::ALL {
        for encoder in [
            VisualEncoderKind::Frame2dRnn,
            VisualEncoderKind::Clip3d,
            VisualEncoderKind::Precomputed,
        ] {
            for global in [true, false] {
                out.push(small(fusion, encoder, global));
            }
        }
    }
    out
}

#[test]
fn every_variant_outputs_a_probability() {
    for cfg in all_small_configs() {
        let model = FusionModel::build(cfg.clone(), 3).unwrap();
        for seed in 0..3 {
            let p = model.predict(&bundle(&cfg, seed)).unwrap();
            assert!(p > 0.0 && p < 1.0, "{cfg:?}: {p}");
        }
    }
}

#[test]
fn image_inputs_run_through_both_encoders() {
    for encoder in [VisualEncoderKind::Frame2dRnn, VisualEncoderKind::Clip3d] {
        for fusion in FusionKind::ALL {
            let cfg = ModelConfig {
                visual_input: VisualInput::Images {
                    height: 8,
                    width: 8,
                    channels: 1,
                },
                conv_channels: 2,
                ..small(fusion, encoder, true)
            };
            let model = FusionModel::build(cfg.clone(), 1).unwrap();
            let p = model.predict(&bundle(&cfg, 0)).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

#[test]
fn precomputed_encoder_rejects_images() {
    let cfg = ModelConfig {
        visual_input: VisualInput::Images {
            height: 8,
            width: 8,
            channels: 3,
        },
        ..small(FusionKind::Hybrid, VisualEncoderKind::Precomputed, true)
    };
    assert!(matches!(FusionModel::build(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn build_is_deterministic() {
    let cfg = ModelConfig::desk();
    let a = FusionModel::build(cfg.clone(), 9).unwrap();
    let b = FusionModel::build(cfg.clone(), 9).unwrap();
    assert_eq!(a.params(), b.params());
    let c = FusionModel::build(cfg, 10).unwrap();
    assert_ne!(a.params().flat(), c.params().flat());
}

#[test]
fn structural_counts() {
    let ours = FusionModel::build(small(FusionKind::Hybrid, VisualEncoderKind::Frame2dRnn, true), 0)
        .unwrap()
        .summary();
    assert_eq!(ours.visual_branches, 2);
    assert_eq!(ours.fusion_stack_depth, 3);
    assert_eq!(ours.attention_blocks, 4);
    assert_eq!(ours.modality_vectors, 3);

    let ours4 = FusionModel::build(small(FusionKind::Later, VisualEncoderKind::Frame2dRnn, false), 0)
        .unwrap()
        .summary();
    assert_eq!(ours4.modality_vectors, 4);
    assert_eq!(ours4.visual_branches, 1);

    let later = FusionModel::build(small(FusionKind::Later, VisualEncoderKind::Frame2dRnn, true), 0)
        .unwrap()
        .summary();
    assert_eq!(later.modality_vectors, 5);

    let hier = |g| {
        FusionModel::build(small(FusionKind::Hierarchical, VisualEncoderKind::Frame2dRnn, g), 0)
            .unwrap()
            .summary()
            .gru_layers
    };
    assert_eq!(hier(true), 5);
    assert_eq!(hier(false), 4);

    let early = FusionModel::build(small(FusionKind::Early, VisualEncoderKind::Frame2dRnn, true), 0)
        .unwrap();
    let w = early.params().id("early.gru.w_z").unwrap();
    assert_eq!(early.params().get(w).shape(), &[45 + 2 * 8, 8]);
}

#[test]
fn modality_vectors_have_hidden_width() {
    let cfg = ModelConfig {
        hidden_dim: 256,
        feature_dim: 512,
        ..ModelConfig::default()
    };
    let cfg = ModelConfig { seq_len: 16, ..cfg };
    let model = FusionModel::build(cfg.clone(), 0).unwrap();
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut cx = Ctx::eval(&mut g, &vars);
    let out = model.forward(&mut cx, &bundle(&cfg, 0)).unwrap();
    assert_eq!(out.modality_vectors.len(), 3);
    for v in &out.modality_vectors {
        assert_eq!(g.shape(*v), &[1, 256]);
    }
    let w = out.modality_weights.unwrap();
    let sum: f64 = g.value(w).iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn identical_modality_vectors_give_uniform_weights() {
    // zero pose/bbox/speed GRUs and identical visual inputs make every branch emit
    // the same vector only if the branches share weights, so instead copy the
    // local branch parameters into every other branch of matching shape
    let cfg = small(FusionKind::Later, VisualEncoderKind::Precomputed, true);
    let mut model = FusionModel::build(cfg.clone(), 4).unwrap();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if let Some(rest) = name.strip_prefix("global.") {
            let src = model.params().id(&format!("local.{rest}")).unwrap();
            let dst = model.params().id(name).unwrap();
            let value = model.params().get(src).clone();
            *model.params_mut().get_mut(dst) = value;
        }
    }
    let mut b = bundle(&cfg, 1);
    b.global = Some(b.local.clone());
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut cx = Ctx::eval(&mut g, &vars);
    let out = model.forward(&mut cx, &b).unwrap();
    assert_eq!(g.value(out.modality_vectors[0]), g.value(out.modality_vectors[1]));

    // with W_s zero every modality scores equally
    let ws = model.params().id("fusion.att.w_s").unwrap();
    model.params_mut().get_mut(ws).data_mut().fill(0.0);
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut cx = Ctx::eval(&mut g, &vars);
    let out = model.forward(&mut cx, &b).unwrap();
    for &w in g.value(out.modality_weights.unwrap()) {
        assert!((w - 0.2).abs() < 1e-12);
    }
}

#[test]
fn eval_forward_is_deterministic() {
    for cfg in all_small_configs() {
        let model = FusionModel::build(cfg.clone(), 5).unwrap();
        let b = bundle(&cfg, 7);
        assert_eq!(
            model.predict(&b).unwrap().to_bits(),
            model.predict(&b).unwrap().to_bits()
        );
    }
}

#[test]
fn batch_order_permutes_outputs() {
    let cfg = small(FusionKind::Hybrid, VisualEncoderKind::Frame2dRnn, true);
    let model = FusionModel::build(cfg.clone(), 2).unwrap();
    let bundles: Vec<_> = (0..5).map(|s| bundle(&cfg, s)).collect();
    let forward = model.predict_batch(&bundles).unwrap();
    let reversed: Vec<_> = bundles.iter().rev().cloned().collect();
    let mut backward = model.predict_batch(&reversed).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn disabled_global_context_is_ignored() {
    for fusion in FusionKind::ALL {
        let cfg = small(fusion, VisualEncoderKind::Frame2dRnn, false);
        let model = FusionModel::build(cfg.clone(), 8).unwrap();
        let mut b = bundle(&cfg, 0);
        let base = model.predict(&b).unwrap();
        b.global = Some(Tensor::full(&cfg.visual_shape(), 123.0).unwrap());
        assert_eq!(model.predict(&b).unwrap(), base);
        b.global = None;
        assert_eq!(model.predict(&b).unwrap(), base);
    }
}

#[test]
fn missing_global_context_is_an_input_error() {
    let cfg = small(FusionKind::Hybrid, VisualEncoderKind::Frame2dRnn, true);
    let model = FusionModel::build(cfg.clone(), 0).unwrap();
    let mut b = bundle(&cfg, 0);
    b.global = None;
    assert!(matches!(model.predict(&b), Err(Error::Input(_))));
    let mut b = bundle(&cfg, 0);
    b.bbox = Tensor::zeros(&[4, 3]).unwrap();
    assert!(matches!(model.predict(&b), Err(Error::Input(_))));
}

#[test]
fn zeroing_pose_changes_the_output() {
    let cfg = small(FusionKind::Hybrid, VisualEncoderKind::Frame2dRnn, true);
    let mut changed = 0;
    for seed in 0..5 {
        let model = FusionModel::build(cfg.clone(), seed).unwrap();
        let mut b = bundle(&cfg, seed + 100);
        let before = model.predict(&b).unwrap();
        b.pose = Tensor::zeros(&[cfg.seq_len, 36]).unwrap();
        if (model.predict(&b).unwrap() - before).abs() > 0.0 {
            changed += 1;
        }
    }
    assert!(changed >= 4, "{changed}");
}

#[test]
fn centered_probability_matches_sigmoid() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row(&[-3.0, -0.2, 0.0, 0.7, 5.0]).unwrap());
    let c = centered_prob(&mut g, z);
    let p = g.sigmoid(z);
    for (a, b) in g.value(c).iter().zip(g.value(p)) {
        assert!((a + 0.5 - b).abs() < 1e-15);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for (i, fusion) in FusionKind::ALL.into_iter().enumerate() {
        let cfg = small(fusion, VisualEncoderKind::Frame2dRnn, true);
        let seed = 21 + i as u64;
        let model = FusionModel::build(cfg.clone(), seed).unwrap();
        let b = bundle(&cfg, seed + 100);
        let r = finite_diff_check(
            |g, vars| {
                let mut cx = Ctx::eval(g, vars);
                let out = model.forward(&mut cx, &b)?;
                Ok(centered_prob(cx.graph, out.logit))
            },
            model.params().tensors(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{fusion:?}: {r:?}");
        assert_eq!(r.coordinates, model.params().num_values());
    }
}

#[test]
fn desk_grid_builds() {
    for v in variant_grid_from(&ModelConfig::desk()) {
        let model = FusionModel::build(v.config.clone(), 0).unwrap();
        let p = model.predict(&bundle(&v.config, 0)).unwrap();
        assert!(p > 0.0 && p < 1.0, "{}", v.name);
    }
}
