//! Tracks, observation windows, manifest ingestion and synthetic scenarios.

mod manifest;
mod sidecar;
mod synth;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ChannelBundle, VisualInput, BBOX_DIM, POSE_DIM, SPEED_DIM};
use crate::tensor::Tensor;

pub use manifest::{load_dataset, load_manifest, write_dataset, ManifestHeader, MANIFEST_FILE};
pub use sidecar::{read_tensor, write_tensor};
pub use synth::{synth_generate, ChannelStrengths, SynthConfig};

/// Number of driver-action codes: stopped, slow, fast, decelerating, accelerating.
pub const DRIVER_ACTIONS: u8 = SPEED_DIM as u8;
pub const DEFAULT_FRAME_RATE: f64 = 30.0;
/// Frames between the last observation and the event: 1-2 s at 30 fps.
pub const DEFAULT_TTE: (usize, usize) = (30, 60);
pub const DEFAULT_OVERLAP: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// `(x_top, y_top, x_bottom, y_bottom)` in pixels.
    pub bbox: [f64; 4],
    /// 18 keypoints as `(x, y)` pixel pairs; `None` when occluded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    pub action: u8,
}

/// One tracked pedestrian up to its crossing / not-crossing event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub track_id: String,
    pub label: u8,
    /// Index of the event frame, counted from the first frame of `frames`.
    pub event_frame: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// Sidecar file with one local-context row per frame.
    pub local: String,
    /// Sidecar file with one global-context row per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<String>,
    pub frames: Vec<FrameRecord>,
}

fn default_frame_rate() -> f64 {
    DEFAULT_FRAME_RATE
}

impl TrackRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            track_id: self.track_id.clone(),
            msg,
        };
        if self.label > 1 {
            return Err(fail(format!("label {} is not 0 or 1", self.label)));
        }
        if !(self.frame_rate > 0.0) {
            return Err(fail(format!("frame rate {} must be positive", self.frame_rate)));
        }
        if self.frames.is_empty() {
            return Err(fail("track has no frames".into()));
        }
        if self.event_frame < self.frames.len() {
            return Err(fail(format!(
                "event frame {} lies inside the {} observed frames",
                self.event_frame,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let [xt, yt, xb, yb] = f.bbox;
            if f.bbox.iter().any(|v| !v.is_finite()) || !(xt < xb && yt < yb) {
                return Err(fail(format!("frame {i}: bbox {:?} is not top-left/bottom-right", f.bbox)));
            }
            if f.action >= DRIVER_ACTIONS {
                return Err(fail(format!("frame {i}: driver action {} out of range", f.action)));
            }
            if let Some(p) = &f.pose {
                if p.len() != POSE_DIM || p.iter().any(|v| !v.is_finite()) {
                    return Err(fail(format!(
                        "frame {i}: pose needs {POSE_DIM} finite values, got {}",
                        p.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Context tensors keyed by sidecar name, read from disk on first use.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    root: Option<PathBuf>,
    cache: HashMap<String, Tensor>,
}

impl FeatureStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Resolves names relative to `root`.
    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        FeatureStore {
            root: Some(root.into()),
            cache: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.cache.insert(name.into(), tensor);
    }

    pub fn get(&mut self, name: &str) -> Result<&Tensor> {
        if !self.cache.contains_key(name) {
            let root = self.root.as_ref().ok_or_else(|| {
                Error::Input(format!("context tensor {name:?} is not loaded"))
            })?;
            let t = read_tensor(&root.join(name))?;
            self.cache.insert(name.to_string(), t);
        }
        Ok(&self.cache[name])
    }

    /// Names of all tensors held in memory, sorted.
    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.cache.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// Tracks plus the metadata and context tensors they reference.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub tracks: Vec<TrackRecord>,
    pub store: FeatureStore,
}

impl Dataset {
    pub fn base_dir(&self) -> Option<&Path> {
        self.store.root.as_deref()
    }
}

/// One observation window of `T` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    pub bundle: ChannelBundle,
    /// Per-frame pose presence; absent frames hold zeros in `bundle.pose`.
    pub pose_present: Vec<bool>,
    pub label: u8,
    pub track_id: String,
    /// Frames from the last observed frame to the event.
    pub time_to_event: usize,
    pub start_frame: usize,
    /// Set once bbox and pose are in normalized coordinates.
    pub normalized: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Windows {
    pub windows: Vec<SampleWindow>,
    /// Tracks with fewer usable frames than `T`.
    pub skipped_short: usize,
}

/// Window stride for an overlap ratio: `(1 - overlap) * T` rounded half-down, at least 1.
pub fn window_stride(seq_len: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::contract(format!("overlap {overlap} outside [0, 1)")));
    }
    let raw = (1.0 - overlap) * seq_len as f64;
    // ties go down; the slack absorbs products like 0.35 * 10 = 3.5000000000000004
    Ok(((raw - 0.5 - 1e-9).ceil() as usize).max(1))
}

/// Number of windows a track with `usable` frames yields before the TTE filter.
pub fn candidate_count(usable: usize, seq_len: usize, stride: usize) -> usize {
    if usable < seq_len {
        0
    } else {
        (usable - seq_len) / stride + 1
    }
}

/// Cuts sliding windows from every track and keeps those whose last frame
/// lies `tte.0..=tte.1` frames before the event.
pub fn make_windows(
    tracks: &[TrackRecord],
    store: &mut FeatureStore,
    seq_len: usize,
    overlap: f64,
    tte: (usize, usize),
) -> Result<Windows> {
    if seq_len == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    let stride = window_stride(seq_len, overlap)?;
    let mut out = Windows::default();
    for track in tracks {
        let usable = track.frames.len().min(track.event_frame);
        let count = candidate_count(usable, seq_len, stride);
        if count == 0 {
            out.skipped_short += 1;
            continue;
        }
        for k in 0..count {
            let start = k * stride;
            let last = start + seq_len - 1;
            let n = track.event_frame - last;
            if n < tte.0 || n > tte.1 {
                continue;
            }
            out.windows.push(cut_window(track, store, start, seq_len, n)?);
        }
    }
    if out.skipped_short > 0 {
        log::warn!("skipped {} tracks shorter than {seq_len} frames", out.skipped_short);
    }
    Ok(out)
}

fn cut_window(
    track: &TrackRecord,
    store: &mut FeatureStore,
    start: usize,
    seq_len: usize,
    time_to_event: usize,
) -> Result<SampleWindow> {
    let frames = &track.frames[start..start + seq_len];
    let mut pose = Vec::with_capacity(seq_len * POSE_DIM);
    let mut pose_present = Vec::with_capacity(seq_len);
    let mut bbox = Vec::with_capacity(seq_len * BBOX_DIM);
    let mut speed = vec![0.0; seq_len * SPEED_DIM];
    for (t, f) in frames.iter().enumerate() {
        match &f.pose {
            Some(p) => pose.extend_from_slice(p),
            None => pose.extend(std::iter::repeat_n(0.0, POSE_DIM)),
        }
        pose_present.push(f.pose.is_some());
        bbox.extend_from_slice(&f.bbox);
        speed[t * SPEED_DIM + usize::from(f.action)] = 1.0;
    }
    let context = |store: &mut FeatureStore, name: &str| -> Result<Tensor> {
        let t = store.get(name)?;
        if t.shape()[0] != track.frames.len() {
            return Err(Error::Validation {
                track_id: track.track_id.clone(),
                msg: format!(
                    "context {name:?} has {} rows for {} frames",
                    t.shape()[0],
                    track.frames.len()
                ),
            });
        }
        t.slice_rows(start, seq_len)
    };
    let local = context(store, &track.local)?;
    let global = match &track.global {
        Some(name) => Some(context(store, name)?),
        None => None,
    };
    Ok(SampleWindow {
        bundle: ChannelBundle {
            pose: Tensor::new(vec![seq_len, POSE_DIM], pose)?,
            bbox: Tensor::new(vec![seq_len, BBOX_DIM], bbox)?,
            speed: Tensor::new(vec![seq_len, SPEED_DIM], speed)?,
            local,
            global,
        },
        pose_present,
        label: track.label,
        track_id: track.track_id.clone(),
        time_to_event,
        start_frame: start,
        normalized: false,
    })
}

/// Maps bbox coordinates into `[0, 1]` frame units and pose keypoints into
/// bbox-relative units (top-left at the origin, divided by bbox width and
/// height). Windows already flagged as normalized are returned unchanged.
pub fn normalize_bundle(w: &SampleWindow, frame_w: f64, frame_h: f64) -> Result<SampleWindow> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(Error::contract(format!(
            "frame size {frame_w}x{frame_h} must be positive"
        )));
    }
    if w.normalized {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    let steps = w.bundle.bbox.shape()[0];
    let bbox = out.bundle.bbox.data_mut();
    let pose = out.bundle.pose.data_mut();
    for t in 0..steps {
        let b = &mut bbox[t * BBOX_DIM..(t + 1) * BBOX_DIM];
        let (x0, y0) = (b[0], b[1]);
        let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
        if !(bw > 0.0 && bh > 0.0) {
            return Err(Error::Validation {
                track_id: w.track_id.clone(),
                msg: format!("frame {}: bbox has zero area", w.start_frame + t),
            });
        }
        b[0] /= frame_w;
        b[1] /= frame_h;
        b[2] /= frame_w;
        b[3] /= frame_h;
        if w.pose_present[t] {
            for xy in pose[t * POSE_DIM..(t + 1) * POSE_DIM].chunks_exact_mut(2) {
                xy[0] = (xy[0] - x0) / bw;
                xy[1] = (xy[1] - y0) / bh;
            }
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Normalizes every window of a dataset using its header's frame size.
pub fn prepare_windows(
    dataset: &mut Dataset,
    seq_len: usize,
    overlap: f64,
    tte: (usize, usize),
) -> Result<Windows> {
    let mut w = make_windows(&dataset.tracks, &mut dataset.store, seq_len, overlap, tte)?;
    let (fw, fh) = (dataset.header.frame_width, dataset.header.frame_height);
    w.windows = w
        .windows
        .iter()
        .map(|s| normalize_bundle(s, fw, fh))
        .collect::<Result<_>>()?;
    Ok(w)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partitions {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

/// Deterministic shuffle-and-cut into train/val/test. With `by_track`, all
/// windows of one track land in the same partition.
pub fn split(
    windows: Vec<SampleWindow>,
    ratios: [f64; 3],
    seed: u64,
    by_track: bool,
) -> Result<Partitions> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    // groups in first-appearance order, so the shuffle input is deterministic
    let mut groups: Vec<Vec<SampleWindow>> = Vec::new();
    if by_track {
        let mut index: HashMap<String, usize> = HashMap::new();
        for w in windows {
            let next = groups.len();
            let g = *index.entry(w.track_id.clone()).or_insert(next);
            if g == next {
                groups.push(Vec::new());
            }
            groups[g].push(w);
        }
    } else {
        groups = windows.into_iter().map(|w| vec![w]).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let n = groups.len() as f64;
    let first = (ratios[0] * n).round() as usize;
    let second = (((ratios[0] + ratios[1]) * n).round() as usize).max(first);
    let mut parts = Partitions::default();
    for (i, g) in groups.into_iter().enumerate() {
        let dst = if i < first {
            &mut parts.train
        } else if i < second {
            &mut parts.val
        } else {
            &mut parts.test
        };
        dst.extend(g);
    }
    Ok(parts)
}

impl Partitions {
    /// True when no track id occurs in more than one partition.
    pub fn is_track_disjoint(&self) -> bool {
        let ids = |p: &[SampleWindow]| -> HashSet<String> {
            p.iter().map(|w| w.track_id.clone()).collect()
        };
        let (a, b, c) = (ids(&self.train), ids(&self.val), ids(&self.test));
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }
}

/// Shape of the context rows implied by a header.
pub fn context_row_shape(visual: &VisualInput, feature_dim: usize) -> Vec<usize> {
    match *visual {
        VisualInput::Features => vec![feature_dim],
        VisualInput::Images {
            height,
            width,
            channels,
        } => vec![height, width, channels],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: &str, frames: usize, event: usize) -> TrackRecord {
        TrackRecord {
            track_id: id.into(),
            label: 1,
            event_frame: event,
            frame_rate: 30.0,
            local: format!("{id}.local"),
            global: None,
            frames: (0..frames)
                .map(|i| FrameRecord {
                    bbox: [10.0 + i as f64, 20.0, 50.0 + i as f64, 120.0],
                    pose: (i % 3 != 0).then(|| vec![30.0; POSE_DIM]),
                    action: (i % 5) as u8,
                })
                .collect(),
        }
    }

    fn store_for(tracks: &[TrackRecord]) -> FeatureStore {
        let mut s = FeatureStore::in_memory();
        for t in tracks {
            let n = t.frames.len();
            s.insert(t.local.clone(), Tensor::from_fn(&[n, 3], |i| i as f64).unwrap());
        }
        s
    }

    #[test]
    fn stride_rule() {
        assert_eq!(window_stride(16, 0.8).unwrap(), 3);
        assert_eq!(window_stride(16, 0.0).unwrap(), 16);
        assert_eq!(window_stride(10, 0.95).unwrap(), 1);
        // 2.5 rounds down
        assert_eq!(window_stride(10, 0.75).unwrap(), 2);
        assert_eq!(window_stride(10, 0.65).unwrap(), 3);
        assert_eq!(window_stride(10, 0.6).unwrap(), 4);
        assert!(window_stride(16, 1.0).is_err());
    }

    #[test]
    fn exact_length_track_gives_one_window() {
        let tracks = [track("a", 16, 16 + 44)];
        let mut store = store_for(&tracks);
        let w = make_windows(&tracks, &mut store, 16, 0.8, DEFAULT_TTE).unwrap();
        assert_eq!(w.windows.len(), 1);
        let s = &w.windows[0];
        assert_eq!(s.time_to_event, 45);
        assert_eq!(s.bundle.local.shape(), &[16, 3]);
        assert_eq!(s.bundle.speed.data().iter().sum::<f64>(), 16.0);
        assert!(!s.pose_present[0] && s.pose_present[1]);
    }

    #[test]
    fn disjoint_windows_without_overlap() {
        let tracks = [track("a", 48, 100)];
        let mut store = store_for(&tracks);
        let w = make_windows(&tracks, &mut store, 16, 0.0, (0, 1000)).unwrap();
        let starts: Vec<_> = w.windows.iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, [0, 16, 32]);
    }

    #[test]
    fn short_tracks_are_counted_not_fatal() {
        let tracks = [track("a", 5, 40), track("b", 16, 50)];
        let mut store = store_for(&tracks);
        let w = make_windows(&tracks, &mut store, 16, 0.8, DEFAULT_TTE).unwrap();
        assert_eq!(w.skipped_short, 1);
        assert_eq!(w.windows.len(), 1);
    }

    #[test]
    fn tte_filter() {
        let tracks = [track("a", 40, 70)];
        let mut store = store_for(&tracks);
        let w = make_windows(&tracks, &mut store, 16, 0.8, DEFAULT_TTE).unwrap();
        assert_eq!(candidate_count(40, 16, 3), 9);
        for s in &w.windows {
            assert!((30..=60).contains(&s.time_to_event));
        }
        // last frames 15, 18, ..., 39 give n = 55 .. 31
        assert_eq!(w.windows.len(), 9);
    }

    #[test]
    fn normalization() {
        let tracks = [track("a", 16, 50)];
        let mut store = store_for(&tracks);
        let mut w = make_windows(&tracks, &mut store, 16, 0.8, DEFAULT_TTE).unwrap().windows;
        let s = w.remove(0);
        let n = normalize_bundle(&s, 100.0, 200.0).unwrap();
        assert_eq!(&n.bundle.bbox.data()[..4], &[0.1, 0.1, 0.5, 0.6]);
        // frame 1 pose at (30, 30), bbox top-left (11, 20), size 40 x 100
        assert_eq!(n.bundle.pose.data()[POSE_DIM], 19.0 / 40.0);
        assert_eq!(n.bundle.pose.data()[POSE_DIM + 1], 0.1);
        // absent pose stays zero
        assert!(n.bundle.pose.data()[..POSE_DIM].iter().all(|&v| v == 0.0));
        assert_eq!(normalize_bundle(&n, 100.0, 200.0).unwrap(), n);

        let mut full = s.clone();
        full.bundle.bbox.data_mut()[..4].copy_from_slice(&[0.0, 0.0, 100.0, 200.0]);
        full.bundle.pose.data_mut()[..2].copy_from_slice(&[0.0, 0.0]);
        full.pose_present[0] = true;
        let f = normalize_bundle(&full, 100.0, 200.0).unwrap();
        assert_eq!(&f.bundle.bbox.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&f.bundle.pose.data()[..2], &[0.0, 0.0]);

        let mut flat = s;
        flat.bundle.bbox.data_mut()[3] = flat.bundle.bbox.data()[1];
        assert!(matches!(
            normalize_bundle(&flat, 100.0, 200.0),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn splits() {
        let tracks: Vec<_> = (0..10).map(|i| track(&format!("t{i}"), 22, 60)).collect();
        let mut store = store_for(&tracks);
        let w = make_windows(&tracks, &mut store, 16, 0.8, DEFAULT_TTE).unwrap().windows;
        assert_eq!(w.len(), 30);

        let all = split(w.clone(), [1.0, 0.0, 0.0], 3, true).unwrap();
        assert_eq!(all.train.len(), 30);
        let p = split(w.clone(), [0.6, 0.2, 0.2], 3, true).unwrap();
        assert!(p.is_track_disjoint());
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), 30);
        assert_eq!(p.train.len(), 18);
        assert_eq!(p, split(w.clone(), [0.6, 0.2, 0.2], 3, true).unwrap());
        assert!(split(w, [0.5, 0.2, 0.2], 3, true).is_err());
        assert_eq!(split(Vec::new(), [0.6, 0.2, 0.2], 3, true).unwrap(), Partitions::default());
    }

    #[test]
    fn validation_names_the_track() {
        let mut t = track("bad", 16, 50);
        t.frames[3].bbox = [50.0, 0.0, 40.0, 10.0];
        match t.validate() {
            Err(Error::Validation { track_id, .. }) => assert_eq!(track_id, "bad"),
            other => panic!("{other:?}"),
        }
        let mut t = track("early", 16, 10);
        t.event_frame = 10;
        assert!(t.validate().is_err());
    }
}
