//! Loss, optimizer, the training loop and checkpoints.

mod checkpoint;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::layers::{Ctx, ParamSet};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, render_checkpoint, save_checkpoint, Checkpoint,
};
pub use optim::{adam_step, AdamState};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 weight on the final fully connected layer only.
    pub l2_lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    /// Desk-scale defaults for models trained from scratch.
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 16,
            l2_lambda: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Settings used with frozen pretrained backbones at full scale.
    pub fn full_scale() -> Self {
        Hyperparams {
            learning_rate: 5e-7,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        // zero is accepted so that a frozen run can be expressed
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.l2_lambda >= 0.0) {
            return bad(format!("l2 lambda {} must be non-negative", self.l2_lambda));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam epsilon {} must be positive", self.adam_eps));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `probs: [B, 1]` against 0/1 `labels`.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    if g.shape(probs) != [labels.len(), 1] {
        return Err(Error::dim(format!(
            "{} labels for probabilities of shape {:?}",
            labels.len(),
            g.shape(probs)
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("label {bad} is not 0 or 1")));
    }
    let n = labels.len();
    let y = Tensor::new(vec![n, 1], labels.iter().map(|&l| f64::from(l)).collect())?;
    let not_y = Tensor::new(vec![n, 1], labels.iter().map(|&l| f64::from(1 - l)).collect())?;
    let p = g.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let one = g.scalar(1.0);
    let q = g.sub(one, p)?;
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let y = g.constant(y);
    let not_y = g.constant(not_y);
    let pos = g.mul(y, ln_p)?;
    let neg = g.mul(not_y, ln_q)?;
    let both = g.add(pos, neg)?;
    let mean = g.mean_all(both);
    Ok(g.scale(mean, -1.0))
}

/// `lambda * sum(w * w)`.
pub fn l2_penalty(g: &mut Graph, weight: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("l2 lambda {lambda} must be non-negative")));
    }
    let sq = g.mul(weight, weight)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, lambda))
}

/// Records batch loss `bce + l2` on `g`; returns the loss node.
pub fn batch_loss(
    model: &FusionModel,
    cx: &mut Ctx,
    batch: &[&SampleWindow],
    l2_lambda: f64,
) -> Result<Var> {
    let mut probs = Vec::with_capacity(batch.len());
    for w in batch {
        probs.push(model.forward(cx, &w.bundle)?.prob);
    }
    let labels: Vec<u8> = batch.iter().map(|w| w.label).collect();
    let stacked = cx.graph.concat(&probs, 0)?;
    let bce = bce_loss(cx.graph, stacked, &labels)?;
    let head = cx.p(model.head_weight());
    let l2 = l2_penalty(cx.graph, head, l2_lambda)?;
    cx.graph.add(bce, l2)
}

/// Eval-mode probabilities and the mean BCE over `windows`.
pub fn score_windows(model: &FusionModel, windows: &[SampleWindow]) -> Result<(Vec<f64>, f64)> {
    let scores = model.predict_batch(windows.iter().map(|w| &w.bundle))?;
    let mut total = 0.0;
    for (p, w) in scores.iter().zip(windows) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= if w.label == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok((scores, total / windows.len().max(1) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub loss: f64,
    pub scores: Vec<f64>,
}

/// Scores `windows` and computes the five metrics at `threshold`.
pub fn evaluate(model: &FusionModel, windows: &[SampleWindow], threshold: f64) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let (scores, loss) = score_windows(model, windows)?;
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    let report = MetricsReport::compute(&scores, &labels, threshold)?;
    Ok(Evaluation {
        report,
        loss,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_secs: f64,
}

pub const HISTORY_COLUMNS: [&str; 8] = [
    "epoch",
    "train_loss",
    "val_loss",
    "val_accuracy",
    "val_auc",
    "val_f1",
    "val_precision",
    "val_recall",
];

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Rows of [`HISTORY_COLUMNS`]; missing values are empty strings. Values
    /// use the shortest representation that parses back exactly.
    pub fn rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.epochs
            .iter()
            .map(|e| {
                let m = e.val_metrics.as_ref();
                vec![
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    opt(e.val_loss),
                    opt(m.map(|m| m.accuracy)),
                    opt(m.map(|m| m.auc)),
                    opt(m.map(|m| m.f1)),
                    opt(m.map(|m| m.precision)),
                    opt(m.map(|m| m.recall)),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Parameters with the lowest validation loss (training loss when there
    /// is no validation set); `None` when no epoch ran.
    pub best: Option<ParamSet>,
    pub best_epoch: Option<usize>,
}

/// Trains `model` in place with Adam on mean BCE plus the head L2 term.
///
/// Sample order is reshuffled every epoch from `hp.seed`; dropout masks come
/// from a separate stream derived from the same seed, so a run is fully
/// determined by its inputs.
pub fn train(
    model: &mut FusionModel,
    train_set: &[SampleWindow],
    val_set: &[SampleWindow],
    hp: &Hyperparams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let started = Instant::now();
    let mut order_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed_d60f_0000_0001);
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&SampleWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let vars = model.params().bind(&mut g);
            let loss = {
                let mut cx = Ctx::train(&mut g, &vars, &mut dropout_rng);
                batch_loss(model, &mut cx, &batch, hp.l2_lambda)?
            };
            let value = g.item(loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            g.backward(loss)?;
            let grads: Vec<&[f64]> = vars.iter().map(|&v| g.grad(v)).collect();
            adam_step(&mut adam, model.params_mut(), &grads, hp)?;
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let (val_loss, val_metrics) = if val_set.is_empty() {
            (None, None)
        } else {
            let ev = evaluate(model, val_set, DEFAULT_THRESHOLD)?;
            (Some(ev.loss), Some(ev.report))
        };
        let selection = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(l, _, _)| selection < *l) {
            best = Some((selection, epoch, model.params().clone()));
        }
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.5}{}",
            hp.epochs,
            val_loss.map(|v| format!(", val loss {v:.5}")).unwrap_or_default()
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });
    }
    history.wall_time_secs = started.elapsed().as_secs_f64();
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (Some(e), Some(p)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
    })
}
