use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crossing_core::data::{
    load_dataset, prepare_windows, split, synth_generate, write_dataset, Dataset, ManifestHeader,
    Partitions, SampleWindow,
};
use crossing_core::diagnostics::{gradcheck_suite, ComponentCheck, GRADCHECK_TOLERANCE};
use crossing_core::fusion::{variant_grid_from, FusionModel, ModelConfig};
use crossing_core::metrics::MetricsReport;
use crossing_core::training::{evaluate, load_checkpoint, save_checkpoint, train, HISTORY_COLUMNS};

use crate::config::{RunConfig, SplitName};
use crate::error::{CliError, Result};
use crate::tables::{mark_best, render_csv, render_text};

pub const CHECKPOINT_BEST: &str = "checkpoint-best.json";
pub const CHECKPOINT_FINAL: &str = "checkpoint-final.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_TEXT: &str = "history.txt";
pub const METRICS_REPORT: &str = "metrics.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";

pub const ABLATION_COLUMNS: [&str; 10] = [
    "Model",
    "Visual Encoder",
    "Global Context",
    "Fusion Approach",
    "Accuracy",
    "AUC",
    "F1",
    "Precision",
    "Recall",
    "Status",
];
/// Metric column order shared by every report.
pub const METRIC_LABELS: [&str; 5] = ["Accuracy", "AUC", "F1 Score", "Precision", "Recall"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// The command ran but a check it performs did not pass.
    ChecksFailed,
}

/// What a command reports to the terminal.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub status: Status,
    pub text: String,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Outcome {
            status: Status::Success,
            text,
        }
    }
}

pub fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "tool": "crossing",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg.to_json(),
    })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| CliError::Config("an output directory is required (--out)".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// The dataset named by `data.path`, or `[synth]` data generated in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(match &cfg.data.path {
        Some(p) => load_dataset(p)?,
        None => synth_generate(&cfg.synth)?,
    })
}

/// The configured model with the context width and kind of `header`.
pub fn model_for_data(cfg: &RunConfig, header: &ManifestHeader) -> Result<ModelConfig> {
    let mut m = cfg.model_config()?;
    if m.feature_dim != header.feature_dim || m.visual_input != header.visual {
        log::info!(
            "taking context layout from the dataset: {:?}, width {}",
            header.visual,
            header.feature_dim
        );
    }
    m.feature_dim = header.feature_dim;
    m.visual_input = header.visual;
    m.validate()?;
    Ok(m)
}

pub fn partitions(cfg: &RunConfig, dataset: &mut Dataset, seq_len: usize) -> Result<Partitions> {
    let windows = prepare_windows(dataset, seq_len, cfg.data.overlap, cfg.data.tte)?;
    Ok(split(windows.windows, cfg.data.split, cfg.seed, cfg.data.by_track)?)
}

fn select(parts: Partitions, which: SplitName) -> Vec<SampleWindow> {
    match which {
        SplitName::Train => parts.train,
        SplitName::Val => parts.val,
        SplitName::Test => parts.test,
        SplitName::All => {
            let mut all = parts.train;
            all.extend(parts.val);
            all.extend(parts.test);
            all
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Outcome> {
    let out = out_dir(cfg)?;
    let mut ds = synth_generate(&cfg.synth)?;
    ds.header.provenance = Some(provenance("gen-data", cfg));
    write_dataset(out, &mut ds)?;
    let positives = ds.tracks.iter().filter(|t| t.label == 1).count();
    Ok(Outcome::ok(format!(
        "wrote {} tracks ({positives} crossing) to {}\n",
        ds.tracks.len(),
        out.display()
    )))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let out = out_dir(cfg)?;
    let mut ds = load_data(cfg)?;
    let mc = model_for_data(cfg, &ds.header)?;
    let parts = partitions(cfg, &mut ds, mc.seq_len)?;
    let mut model = FusionModel::build(mc, cfg.seed)?;
    let initial = model.params().clone();
    let outcome = train(&mut model, &parts.train, &parts.val, &cfg.train)?;

    let mut best = model.clone();
    best.params_mut().assign(outcome.best.as_ref().unwrap_or(&initial))?;
    let best_epoch = outcome.best_epoch.unwrap_or(0);
    let prov = provenance("train", cfg);

    create_dir(out)?;
    let mut p = prov.clone();
    p["checkpoint"] = json!({"kind": "best", "epoch": best_epoch});
    save_checkpoint(&best, &out.join(CHECKPOINT_BEST), Some(p))?;
    let mut p = prov.clone();
    p["checkpoint"] = json!({"kind": "final", "epoch": outcome.history.len()});
    save_checkpoint(&model, &out.join(CHECKPOINT_FINAL), Some(p))?;
    let rows = outcome.history.rows();
    write(&out.join(HISTORY_CSV), &render_csv(&prov, &HISTORY_COLUMNS, &rows)?)?;
    let rounded: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(|c| round_cell(c, 4)).collect())
        .collect();
    let mut text = render_text(&HISTORY_COLUMNS, &rounded);
    write(
        &out.join(HISTORY_TEXT),
        &format!("{}\n{text}", crate::tables::preamble(&prov)),
    )?;

    text.push_str(&format!(
        "\n{} train / {} val / {} test windows, best epoch {best_epoch}, {:.1}s\n",
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        outcome.history.wall_time_secs
    ));
    if !parts.test.is_empty() {
        let ev = evaluate(&best, &parts.test, cfg.eval.threshold)?;
        text.push_str("\ntest split, best checkpoint\n");
        text.push_str(&metrics_text(&ev.report));
    }
    Ok(Outcome::ok(text))
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    provenance: &'a Value,
    checkpoint: &'a Path,
    split: SplitName,
    windows: usize,
    loss: f64,
    metrics: &'a MetricsReport,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let out = out_dir(cfg)?;
    let ckpt: PathBuf = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint (--checkpoint)".into()))?;
    let model = load_checkpoint(&ckpt)?;
    let mut ds = load_data(cfg)?;
    let mc = model.config();
    if mc.feature_dim != ds.header.feature_dim || mc.visual_input != ds.header.visual {
        return Err(CliError::Core(crossing_core::Error::Config(format!(
            "checkpoint expects {:?} contexts of width {}, dataset has {:?} of width {}",
            mc.visual_input, mc.feature_dim, ds.header.visual, ds.header.feature_dim
        ))));
    }
    let windows = select(partitions(cfg, &mut ds, mc.seq_len)?, cfg.eval.split);
    let ev = evaluate(&model, &windows, cfg.eval.threshold)?;
    let prov = provenance("eval", cfg);
    let doc = MetricsDocument {
        provenance: &prov,
        checkpoint: &ckpt,
        split: cfg.eval.split,
        windows: windows.len(),
        loss: ev.loss,
        metrics: &ev.report,
    };
    let body = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    create_dir(out)?;
    write(&out.join(METRICS_REPORT), &body)?;
    Ok(Outcome::ok(format!(
        "{} split, {} windows\n{}",
        cfg.eval.split.as_str(),
        windows.len(),
        metrics_text(&ev.report)
    )))
}

/// Fractional numbers to `digits` decimals; anything else unchanged.
fn round_cell(cell: &str, digits: usize) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') || cell.contains('e') => format!("{v:.digits$}"),
        _ => cell.to_string(),
    }
}

/// One line of headers and one of values, with degenerate metrics flagged.
pub fn metrics_text(r: &MetricsReport) -> String {
    let keys = ["accuracy", "auc", "f1", "precision", "recall"];
    let values: Vec<String> = r
        .columns()
        .iter()
        .zip(keys)
        .map(|((_, v), k)| {
            if r.is_degenerate(k) {
                format!("{v:.3} (undefined)")
            } else {
                format!("{v:.3}")
            }
        })
        .collect();
    render_text(&METRIC_LABELS, &[values])
}

/// One ablation row; `result` holds the test metrics or the failure message.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: ModelConfig,
    pub result: std::result::Result<MetricsReport, String>,
}

impl AblationRow {
    fn leading_cells(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            self.name.to_string(),
            c.visual_encoder.label().to_string(),
            if c.use_global_context { "✓" } else { "✗" }.to_string(),
            c.fusion.label().to_string(),
        ]
    }

    fn cells(&self, fmt: impl Fn(f64) -> String) -> Vec<String> {
        let mut cells = self.leading_cells();
        match &self.result {
            Ok(r) => {
                cells.extend(r.columns().iter().map(|&(_, v)| fmt(v)));
                cells.push("ok".into());
            }
            Err(e) => {
                cells.extend(std::iter::repeat_n(String::new(), 5));
                cells.push(format!("failed: {e}"));
            }
        }
        cells
    }
}

/// Trains and tests every grid variant on one shared split.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut ds = load_data(cfg)?;
    let base = model_for_data(cfg, &ds.header)?;
    let parts = partitions(cfg, &mut ds, base.seq_len)?;
    if parts.test.is_empty() || parts.train.is_empty() {
        return Err(CliError::Config(format!(
            "ablation needs train and test windows, got {} and {}",
            parts.train.len(),
            parts.test.len()
        )));
    }
    let grid = variant_grid_from(&base);
    let results: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let run_one = |i: usize| -> std::result::Result<MetricsReport, String> {
        let v = &grid[i];
        let started = Instant::now();
        let mut model = FusionModel::build(v.config.clone(), cfg.seed).map_err(|e| e.to_string())?;
        let outcome = train(&mut model, &parts.train, &parts.val, &cfg.train).map_err(|e| e.to_string())?;
        if let Some(best) = &outcome.best {
            model.params_mut().assign(best).map_err(|e| e.to_string())?;
        }
        let ev = evaluate(&model, &parts.test, cfg.eval.threshold).map_err(|e| e.to_string())?;
        log::info!("{} done in {:.1}s", v.name, started.elapsed().as_secs_f64());
        Ok(ev.report)
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.ablate.jobs.min(grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let result = run_one(i);
                if let Err(e) = &result {
                    log::warn!("{} failed: {e}", grid[i].name);
                }
                results.lock().expect("no worker panicked")[i] = Some(AblationRow {
                    name: grid[i].name,
                    config: grid[i].config.clone(),
                    result,
                });
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every variant ran"))
        .collect())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Outcome> {
    let out = out_dir(cfg)?;
    let rows = run_ablation(cfg)?;
    let prov = provenance("ablate", cfg);
    let csv_rows: Vec<Vec<String>> = rows.iter().map(|r| r.cells(|v| v.to_string())).collect();
    let mut text_rows: Vec<Vec<String>> = rows.iter().map(|r| r.cells(|v| format!("{v:.3}"))).collect();
    mark_best(&mut text_rows, &[4, 5, 6, 7, 8]);
    let mut text = render_text(&ABLATION_COLUMNS, &text_rows);
    text.push_str("* best in column\n");

    create_dir(out)?;
    write(&out.join(ABLATION_CSV), &render_csv(&prov, &ABLATION_COLUMNS, &csv_rows)?)?;
    write(
        &out.join(ABLATION_TEXT),
        &format!("{}\n{text}", crate::tables::preamble(&prov)),
    )?;
    Ok(Outcome::ok(text))
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    let checks = gradcheck_suite(&cfg.gradcheck)?;
    let elapsed = started.elapsed().as_secs_f64();
    let rows: Vec<Vec<String>> = checks.iter().map(check_cells).collect();
    let mut text = render_text(&["component", "max rel error", "worst coordinate", "coordinates", "result"], &rows);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    text.push_str(&format!(
        "\n{} components, {failed} at or above {GRADCHECK_TOLERANCE:e}, {elapsed:.1}s\n",
        checks.len()
    ));
    if let Some(out) = &cfg.out {
        #[derive(Serialize)]
        struct Doc<'a> {
            provenance: Value,
            tolerance: f64,
            components: &'a [ComponentCheck],
        }
        let doc = Doc {
            provenance: provenance("gradcheck", cfg),
            tolerance: GRADCHECK_TOLERANCE,
            components: &checks,
        };
        create_dir(out)?;
        write(
            &out.join(GRADCHECK_REPORT),
            &(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"),
        )?;
    }
    Ok(Outcome {
        status: if failed == 0 {
            Status::Success
        } else {
            Status::ChecksFailed
        },
        text,
    })
}

fn check_cells(c: &ComponentCheck) -> Vec<String> {
    vec![
        c.component.clone(),
        format!("{:.3e}", c.max_rel_error),
        c.worst.clone().unwrap_or_default(),
        c.coordinates.to_string(),
        if c.passed() { "pass" } else { "FAIL" }.to_string(),
    ]
}
