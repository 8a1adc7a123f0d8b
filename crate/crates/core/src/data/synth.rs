//! Labeled synthetic tracks with tunable per-channel signal.
//!
//! Every channel is noise plus a label-dependent term scaled by its strength,
//! with `s = +1` for crossing and `-1` otherwise:
//! - pose: keypoints drift sideways inside the bbox by `0.3 s a` over the window;
//! - bbox: horizontal velocity of `15 s a` px per frame;
//! - speed: with probability `a` the driver action comes from a label-specific
//!   set (crossing: stopped/slow/decelerating, else fast/accelerating);
//! - feature contexts: coordinate 0 is offset by `s a`;
//! - image contexts: a bright square whose intensity is `0.5 + 0.5 s a` and
//!   whose column drifts with the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{VisualInput, POSE_DIM};
use crate::tensor::Tensor;

use super::{context_row_shape, Dataset, FeatureStore, FrameRecord, ManifestHeader, TrackRecord};

const POSE_DRIFT: f64 = 0.3;
const POSE_NOISE: f64 = 0.1;
const BBOX_SPEED_PX: f64 = 15.0;
const BBOX_NOISE_PX: f64 = 8.0;
const ACTION_FLIP: f64 = 0.5;

/// Relative `(x, y)` of 18 keypoints in a standing pose, top to bottom.
const SKELETON: [(f64, f64); 18] = [
    (0.50, 0.08),
    (0.50, 0.18),
    (0.35, 0.20),
    (0.30, 0.35),
    (0.28, 0.50),
    (0.65, 0.20),
    (0.70, 0.35),
    (0.72, 0.50),
    (0.42, 0.52),
    (0.40, 0.72),
    (0.40, 0.93),
    (0.58, 0.52),
    (0.60, 0.72),
    (0.60, 0.93),
    (0.46, 0.06),
    (0.54, 0.06),
    (0.42, 0.08),
    (0.58, 0.08),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelStrengths {
    pub pose: f64,
    pub bbox: f64,
    pub speed: f64,
    pub local: f64,
    pub global: f64,
}

impl ChannelStrengths {
    pub fn only_global(strength: f64) -> Self {
        ChannelStrengths {
            global: strength,
            ..Default::default()
        }
    }

    fn all(&self) -> [(&'static str, f64); 5] {
        [
            ("pose", self.pose),
            ("bbox", self.bbox),
            ("speed", self.speed),
            ("local", self.local),
            ("global", self.global),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of tracks; each yields exactly one default window.
    pub n_samples: usize,
    pub positive_rate: f64,
    pub strengths: ChannelStrengths,
    pub noise_sigma: f64,
    pub visual: VisualInput,
    pub feature_dim: usize,
    pub seq_len: usize,
    /// Inclusive range of frames between the last frame and the event.
    pub tte: (usize, usize),
    pub frame_width: f64,
    pub frame_height: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 640,
            positive_rate: 0.5,
            strengths: ChannelStrengths {
                pose: 0.5,
                bbox: 0.5,
                speed: 0.0,
                local: 0.0,
                global: 0.5,
            },
            noise_sigma: 0.3,
            visual: VisualInput::Features,
            feature_dim: 32,
            seq_len: 16,
            tte: super::DEFAULT_TTE,
            frame_width: 1920.0,
            frame_height: 1080.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad(format!("positive rate {} outside [0, 1]", self.positive_rate));
        }
        for (name, s) in self.strengths.all() {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} strength {s} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if self.seq_len == 0 || self.feature_dim == 0 {
            return bad("seq_len and feature_dim must be positive".into());
        }
        if self.tte.0 > self.tte.1 {
            return bad(format!("empty time-to-event range {:?}", self.tte));
        }
        if let VisualInput::Images {
            height,
            width,
            channels,
        } = self.visual
        {
            if height < 2 || width < 2 || channels == 0 {
                return bad(format!("image size {height}x{width}x{channels} too small"));
            }
        }
        if !(self.frame_width >= 200.0 && self.frame_height >= 200.0) {
            return bad("frames must be at least 200 px on each side".into());
        }
        Ok(())
    }
}

/// Generates `cfg.n_samples` tracks with in-memory context tensors.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut store = FeatureStore::in_memory();
    let mut tracks = Vec::with_capacity(cfg.n_samples);
    let t_len = cfg.seq_len;
    let st = cfg.strengths;
    let sigma = cfg.noise_sigma;

    for i in 0..cfg.n_samples {
        let label = u8::from(rng.random_bool(cfg.positive_rate));
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let id = format!("synth-{i:05}");

        let box_w = rng.random_range(40.0..80.0);
        let box_h = box_w * rng.random_range(2.2..2.8);
        let margin = BBOX_SPEED_PX * t_len as f64 + box_w;
        let lo = margin.min(cfg.frame_width / 3.0);
        let x0 = rng.random_range(lo..(cfg.frame_width - margin).max(lo + 1.0));
        let y0 = rng.random_range(0.2 * cfg.frame_height..(cfg.frame_height - box_h).max(0.3 * cfg.frame_height));
        let velocity = sign * st.bbox * BBOX_SPEED_PX;

        let action_pool: &[u8] = if label == 1 { &[0, 1, 3] } else { &[2, 4] };
        let informative = rng.random_bool(st.speed);
        let base_action = if informative {
            action_pool[rng.random_range(0..action_pool.len())]
        } else {
            rng.random_range(0..super::DRIVER_ACTIONS)
        };

        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let progress = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
            let jitter = |rng: &mut ChaCha8Rng| sigma * BBOX_NOISE_PX * noise.sample(rng);
            let xt = x0 + velocity * t as f64 + jitter(&mut rng);
            let yt = y0 + jitter(&mut rng);
            let bbox = [xt, yt, xt + box_w, yt + box_h];

            let drift = sign * st.pose * POSE_DRIFT * progress;
            let mut pose = Vec::with_capacity(POSE_DIM);
            for &(rx, ry) in &SKELETON {
                let px = rx + drift + sigma * POSE_NOISE * noise.sample(&mut rng);
                let py = ry + sigma * POSE_NOISE * noise.sample(&mut rng);
                pose.push(xt + px * box_w);
                pose.push(yt + py * box_h);
            }

            let action = if rng.random_bool((sigma * ACTION_FLIP).min(1.0)) {
                rng.random_range(0..super::DRIVER_ACTIONS)
            } else {
                base_action
            };
            frames.push(FrameRecord {
                bbox,
                pose: Some(pose),
                action,
            });
        }

        let local = context(cfg, &mut rng, &noise, sign * st.local)?;
        let global = context(cfg, &mut rng, &noise, sign * st.global)?;
        let local_name = format!("tensors/{id}.local.pitn");
        let global_name = format!("tensors/{id}.global.pitn");
        store.insert(local_name.clone(), local);
        store.insert(global_name.clone(), global);

        let tte = rng.random_range(cfg.tte.0..=cfg.tte.1);
        tracks.push(TrackRecord {
            track_id: id,
            label,
            event_frame: t_len - 1 + tte,
            frame_rate: super::DEFAULT_FRAME_RATE,
            local: local_name,
            global: Some(global_name),
            frames,
        });
    }

    let header = ManifestHeader {
        frame_width: cfg.frame_width,
        frame_height: cfg.frame_height,
        visual: cfg.visual,
        feature_dim: cfg.feature_dim,
        provenance: Some(serde_json::json!({ "synth": cfg })),
        ..ManifestHeader::default()
    };
    Ok(Dataset {
        header,
        tracks,
        store,
    })
}

/// `[T, ...]` context clip carrying `signal` in [-1, 1].
fn context(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    signal: f64,
) -> Result<Tensor> {
    let t_len = cfg.seq_len;
    let mut shape = vec![t_len];
    shape.extend(context_row_shape(&cfg.visual, cfg.feature_dim));
    match cfg.visual {
        VisualInput::Features => {
            let d = cfg.feature_dim;
            Tensor::from_fn(&shape, |i| {
                let shift = if i % d == 0 { signal } else { 0.0 };
                shift + cfg.noise_sigma * noise.sample(rng)
            })
        }
        VisualInput::Images {
            height,
            width,
            channels,
        } => {
            let side_h = (height / 2).max(1);
            let side_w = (width / 2).max(1);
            let intensity = 0.5 + 0.5 * signal;
            let top = rng.random_range(0..=height - side_h);
            let start = rng.random_range(0..=width - side_w) as f64;
            let drift = signal * (width - side_w) as f64 / (2.0 * t_len as f64);
            let frame_px = height * width * channels;
            let row_px = width * channels;
            Tensor::from_fn(&shape, |i| {
                let t = i / frame_px;
                let y = (i % frame_px) / row_px;
                let x = (i % row_px) / channels;
                let left = (start + drift * t as f64).clamp(0.0, (width - side_w) as f64) as usize;
                let inside = (top..top + side_h).contains(&y) && (left..left + side_w).contains(&x);
                let base = if inside { intensity } else { 0.0 };
                base + cfg.noise_sigma * noise.sample(rng)
            })
        }
    }
}
