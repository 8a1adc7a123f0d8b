use crossing_core::data::{prepare_windows, split, synth_generate, SampleWindow, SynthConfig};
use crossing_core::fusion::{FusionKind, FusionModel, ModelConfig};
use crossing_core::layers::Ctx;
use crossing_core::training::{
    adam_step, batch_loss, evaluate, load_checkpoint, read_checkpoint, render_checkpoint,
    save_checkpoint, train, AdamState, Hyperparams,
};
use crossing_core::Graph;

const FEATURES: usize = 6;

fn windows(n: usize, seed: u64) -> Vec<SampleWindow> {
    let cfg = SynthConfig {
        n_samples: n,
        feature_dim: FEATURES,
        seed,
        ..SynthConfig::default()
    };
    let mut ds = synth_generate(&cfg).unwrap();
    prepare_windows(&mut ds, 16, 0.8, (30, 60)).unwrap().windows
}

fn config(fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        fusion,
        feature_dim: FEATURES,
        hidden_dim: 8,
        ..ModelConfig::desk()
    }
}

fn hp(epochs: usize, lr: f64) -> Hyperparams {
    Hyperparams {
        epochs,
        learning_rate: lr,
        batch_size: 8,
        seed: 3,
        ..Hyperparams::default()
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let w = windows(40, 1);
    let p = split(w, [0.75, 0.25, 0.0], 0, true).unwrap();
    let run = || {
        let mut m = FusionModel::build(config(FusionKind::Hybrid), 9).unwrap();
        let out = train(&mut m, &p.train, &p.val, &hp(3, 1e-3)).unwrap();
        (out.history.epochs, m.params().flat())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1.len(), 3);
    assert_eq!(h1, h2);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p1), bits(&p2));
    assert!(h1.iter().all(|e| e.train_loss.is_finite()));
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let w = windows(10, 2);
    let mut m = FusionModel::build(config(FusionKind::Later), 1).unwrap();
    let before = m.params().flat();
    let out = train(&mut m, &w, &[], &hp(0, 1e-3)).unwrap();
    assert!(out.history.is_empty());
    assert!(out.best.is_none() && out.best_epoch.is_none());
    assert_eq!(m.params().flat(), before);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let w = windows(12, 3);
    for fusion in FusionKind::ALL {
        let mut m = FusionModel::build(config(fusion), 2).unwrap();
        let before = m.params().flat();
        let out = train(&mut m, &w, &[], &hp(2, 0.0)).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(m.params().flat(), before, "{fusion:?}");
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let mut m = FusionModel::build(config(FusionKind::Hybrid), 0).unwrap();
    assert!(train(&mut m, &[], &[], &hp(1, 1e-3)).is_err());
}

/// Eval-mode loss on `batch`, so the comparison is free of dropout noise.
fn eval_loss(model: &FusionModel, batch: &[&SampleWindow], lambda: f64) -> f64 {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut cx = Ctx::eval(&mut g, &vars);
    let l = batch_loss(model, &mut cx, batch, lambda).unwrap();
    g.item(l).unwrap()
}

#[test]
fn one_small_step_decreases_the_batch_loss() {
    let h = hp(1, 1e-6);
    let mut failures = Vec::new();
    for seed in 0..5u64 {
        let w = windows(8, 100 + seed);
        let batch: Vec<&SampleWindow> = w.iter().collect();
        let mut m = FusionModel::build(config(FusionKind::ALL[seed as usize % 4]), seed).unwrap();
        let before = eval_loss(&m, &batch, h.l2_lambda);

        let mut g = Graph::new();
        let vars = m.params().bind(&mut g);
        let loss = {
            let mut cx = Ctx::eval(&mut g, &vars);
            batch_loss(&m, &mut cx, &batch, h.l2_lambda).unwrap()
        };
        g.backward(loss).unwrap();
        let grads: Vec<&[f64]> = vars.iter().map(|&v| g.grad(v)).collect();
        let mut state = AdamState::new(m.params());
        adam_step(&mut state, m.params_mut(), &grads, &h).unwrap();

        let after = eval_loss(&m, &batch, h.l2_lambda);
        if !(after < before) {
            failures.push((seed, before, after));
        }
    }
    assert!(failures.len() <= 1, "{failures:?}");
}

#[test]
fn checkpoints_round_trip_byte_for_byte_and_score_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let w = windows(30, 4);
    for fusion in FusionKind::ALL {
        let mut m = FusionModel::build(config(fusion), 5).unwrap();
        train(&mut m, &w, &[], &hp(1, 1e-3)).unwrap();
        let path = tmp.path().join("ck.json");
        let prov = serde_json::json!({ "run": fusion.label() });
        save_checkpoint(&m, &path, Some(prov.clone())).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(
            render_checkpoint(&loaded, Some(prov)).unwrap(),
            std::fs::read_to_string(&path).unwrap()
        );
        let (a, b) = (evaluate(&m, &w, 0.5).unwrap(), evaluate(&loaded, &w, 0.5).unwrap());
        assert_eq!(a, b);
        assert_eq!(loaded.config(), m.config());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let m = FusionModel::build(config(FusionKind::Hybrid), 0).unwrap();
    let text = render_checkpoint(&m, None).unwrap();

    let wrong_version = text.replacen("\"version\": 1", "\"version\": 99", 1);
    assert!(read_checkpoint(&wrong_version).unwrap_err().to_string().contains("version 99"));
    let wrong_format = text.replacen("crossing-checkpoint", "something-else", 1);
    assert!(read_checkpoint(&wrong_format).is_err());
    assert!(read_checkpoint(&text[..text.len() / 2]).is_err());
    assert!(read_checkpoint("").is_err());

    // a parameter that no longer fits its config
    let mut ck = read_checkpoint(&text).unwrap();
    ck.config.hidden_dim += 1;
    assert!(ck.into_model().is_err());
}
