//! Line-delimited JSON manifests: a header line, then one track per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::VisualInput;

use super::sidecar::write_tensor;
use super::{Dataset, FeatureStore, TrackRecord};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FORMAT: &str = "crossing-manifest";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Crop scale of the local context around the bbox, recorded as metadata.
    pub local_context_scale: f64,
    /// Label of the target pedestrian inside global semantic masks.
    pub target_mask_id: Option<i64>,
    pub visual: VisualInput,
    /// Width of feature rows when `visual` is `features`.
    pub feature_dim: usize,
    /// Free-form record of how the data was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl Default for ManifestHeader {
    fn default() -> Self {
        ManifestHeader {
            format: FORMAT.into(),
            version: VERSION,
            frame_width: 1920.0,
            frame_height: 1080.0,
            local_context_scale: 1.5,
            target_mask_id: None,
            visual: VisualInput::Features,
            feature_dim: 512,
            provenance: None,
        }
    }
}

impl ManifestHeader {
    fn check(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unknown format {:?}", self.format),
            });
        }
        if self.version != VERSION {
            return Err(Error::Incompatible(format!(
                "manifest version {}, this build reads version {VERSION}",
                self.version
            )));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(Error::Parse {
                line: 1,
                msg: "frame size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Parses manifest text. An empty document yields a default header and no tracks.
pub fn parse_manifest(text: &str) -> Result<(ManifestHeader, Vec<TrackRecord>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let header = match lines.next() {
        None => return Ok((ManifestHeader::default(), Vec::new())),
        Some((line, l)) => {
            let h: ManifestHeader =
                serde_json::from_str(l).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            h.check()?;
            h
        }
    };
    let mut tracks = Vec::new();
    for (line, l) in lines {
        let t: TrackRecord =
            serde_json::from_str(l).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        t.validate()?;
        tracks.push(t);
    }
    Ok((header, tracks))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads and validates the track records of a manifest. Context tensors are
/// not touched.
pub fn load_manifest(path: &Path) -> Result<Vec<TrackRecord>> {
    parse_manifest(&read_text(path)?).map(|(_, t)| t)
}

/// Loads a manifest with a store that reads sidecars next to it on demand.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let (header, tracks) = parse_manifest(&read_text(&path)?)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(Dataset {
        header,
        tracks,
        store: FeatureStore::on_disk(root),
    })
}

pub fn render_manifest(header: &ManifestHeader, tracks: &[TrackRecord]) -> Result<String> {
    let mut out = serde_json::to_string(header).map_err(|e| Error::Input(e.to_string()))?;
    out.push('\n');
    for t in tracks {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and every referenced sidecar under `dir`.
pub fn write_dataset(dir: &Path, dataset: &mut Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in &dataset.tracks {
        t.validate()?;
        for name in std::iter::once(&t.local).chain(&t.global) {
            let target = dir.join(name);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let tensor = dataset.store.get(name)?;
            write_tensor(&target, tensor)?;
        }
    }
    let text = render_manifest(&dataset.header, &dataset.tracks)?;
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
