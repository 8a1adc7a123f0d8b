//! Versioned JSON checkpoints holding the model config and every parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::layers::ParamSet;
use crate::tensor::Tensor;

const FORMAT: &str = "crossing-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &FusionModel, provenance: Option<serde_json::Value>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            provenance,
            params: model
                .params()
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; names and shapes must match what the config builds.
    pub fn into_model(self) -> Result<FusionModel> {
        let mut model = FusionModel::build(self.config, 0)?;
        let mut stored = ParamSet::new();
        for p in self.params {
            stored.add(p.name, Tensor::new(p.shape, p.values)?)?;
        }
        model
            .params_mut()
            .assign(&stored)
            .map_err(|e| Error::Incompatible(format!("checkpoint does not fit its config: {e}")))?;
        Ok(model)
    }
}

pub fn render_checkpoint(model: &FusionModel, provenance: Option<serde_json::Value>) -> Result<String> {
    serde_json::to_string_pretty(&Checkpoint::from_model(model, provenance))
        .map_err(|e| Error::Input(e.to_string()))
}

pub fn save_checkpoint(
    model: &FusionModel,
    path: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    let text = render_checkpoint(model, provenance)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint document, checking format and version first.
pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::Input(format!("unreadable checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Incompatible(format!(
            "not a checkpoint (format {:?})",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {}, this build reads version {VERSION}",
            header.version
        )));
    }
    serde_json::from_str(text).map_err(|e| Error::Input(format!("malformed checkpoint: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)?.into_model()
}
