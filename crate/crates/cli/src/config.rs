//! Run configuration. Built-in defaults are overlaid by an optional TOML file,
//! then by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crossing_core::data::{SynthConfig, DEFAULT_OVERLAP, DEFAULT_TTE};
use crossing_core::diagnostics::GradcheckSetup;
use crossing_core::fusion::{resolve_variant, ModelConfig};
use crossing_core::metrics::DEFAULT_THRESHOLD;
use crossing_core::training::Hyperparams;

use crate::error::{CliError, Result};

/// Section seeds are derived from the top-level `seed`, so files may not set them.
const DERIVED_KEYS: [&str; 3] = ["synth.seed", "train.seed", "gradcheck.seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives data generation, splits, initialization, shuffling and dropout.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: Hyperparams,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSetup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Manifest file or directory. Without one, `[synth]` data is generated
    /// in memory.
    pub path: Option<PathBuf>,
    pub overlap: f64,
    pub tte: (usize, usize),
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Keep all windows of a track in one partition.
    pub by_track: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    /// Grid variant (`Ours`, `Ours1` .. `Ours7`). When set it fixes the
    /// fusion strategy, visual encoder and global-context switch.
    pub variant: Option<String>,
    #[serde(flatten)]
    pub config: ModelConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateSection {
    /// Variants trained concurrently. Results do not depend on it.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            synth: SynthConfig::default(),
            data: DataSection {
                path: None,
                overlap: DEFAULT_OVERLAP,
                tte: DEFAULT_TTE,
                split: [0.7, 0.1, 0.2],
                by_track: true,
            },
            model: ModelSection {
                variant: None,
                config: ModelConfig::desk(),
            },
            train: Hyperparams::default(),
            eval: EvalSection {
                checkpoint: None,
                split: SplitName::Test,
                threshold: DEFAULT_THRESHOLD,
            },
            ablate: AblateSection { jobs: 1 },
            gradcheck: GradcheckSetup::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `file`, if given. Unknown keys are errors.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let Some(path) = file else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for key in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted key");
            if overlay.get(section).and_then(|s| s.get(field)).is_some() {
                return Err(CliError::Config(format!(
                    "`{key}` is derived from the top-level `seed`; set that instead"
                )));
            }
        }
        let mut merged = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut merged, overlay, "")?;
        serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Propagates the seed and checks everything a command could trip over
    /// later, so bad settings fail before any output is written.
    pub fn finish(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.synth.validate()?;
        self.train.validate()?;
        self.model_config()?.validate()?;
        let s = self.data.split;
        if s.iter().any(|r| !(0.0..=1.0).contains(r)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split fractions {s:?} must lie in [0, 1] and sum to 1"
            )));
        }
        if !(0.0..1.0).contains(&self.data.overlap) {
            return Err(CliError::Config(format!(
                "overlap {} outside [0, 1)",
                self.data.overlap
            )));
        }
        if self.ablate.jobs == 0 {
            return Err(CliError::Config("ablate.jobs must be at least 1".into()));
        }
        Ok(self)
    }

    /// The model to build, with the named variant applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(match &self.model.variant {
            Some(name) => resolve_variant(name, &self.model.config)?.config,
            None => self.model.config.clone(),
        })
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Overlays `over` onto `base` key by key. Tables merge recursively, except
/// tagged enums (tables with a `kind` key), which are replaced whole.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    let Value::Object(over) = over else {
        *base = over;
        return Ok(());
    };
    let Value::Object(base_map) = base else {
        *base = Value::Object(over);
        return Ok(());
    };
    for (key, value) in over {
        let at = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        let Some(slot) = base_map.get_mut(&key) else {
            return Err(CliError::Config(format!("unknown setting `{at}`")));
        };
        let tagged = value.get("kind").is_some();
        if slot.is_object() && value.is_object() && !tagged {
            merge(slot, value, &at)?;
        } else {
            *slot = value;
        }
    }
    Ok(())
}
