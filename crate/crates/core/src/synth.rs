//! Synthetic clips whose only identity cue is motion.
//!
//! Every clip shows the same static base image. During a short motion span
//! a Gaussian blob travels along one of `P` straight paths; subject `2p`
//! traverses path `p` forwards and subject `2p + 1` backwards. A single
//! frame at the temporal midpoint of the motion looks identical for both
//! subjects of a pair, so only a model that sees frame order can tell them
//! apart.

use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_clips, load_manifest_with, split_dataset, write_manifest, ClipTensor, DatasetManifest,
    Frame, ManifestOptions, ManifestRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_model;
use crate::model::{InputShape, Layout, ModelConfig};
use crate::seed;
use crate::training::{train_model, SolverConfig};

/// Largest start-frame jitter, in frames.
pub const MAX_START_JITTER: i64 = 3;
/// Relative blob amplitude jitter.
pub const AMPLITUDE_JITTER: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Reverse,
}

/// How subjects are assigned to paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Two subjects per path, one per direction (`K = 2P`).
    #[default]
    ForwardReverse,
    /// One subject per path, forward only (`K = P`). Position alone then
    /// identifies the subject.
    DistinctPaths,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSignature {
    pub subject_id: u64,
    pub path_id: usize,
    pub direction: Direction,
    pub motion_span: usize,
    pub blob_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_paths: usize,
    #[serde(default)]
    pub pairing: Pairing,
    pub clips_per_subject: usize,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub window: usize,
    pub motion_span: usize,
    pub blob_sigma: f64,
    /// Peak blob intensity added to the base image.
    pub blob_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_paths: 4,
            pairing: Pairing::ForwardReverse,
            clips_per_subject: 20,
            frame_size: (64, 64),
            window: 64,
            motion_span: 15,
            blob_sigma: 3.0,
            blob_amplitude: 0.5,
            noise_std: 0.005,
            seed: 0,
        }
    }
}

/// Per-clip random variation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub start_offset: i64,
    pub amplitude_scale: f64,
    pub noise_seed: u64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        start_offset: 0,
        amplitude_scale: 1.0,
        noise_seed: 0,
    };
}

/// One rendered clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub clip_id: String,
    pub signature: SubjectSignature,
    pub jitter: Jitter,
    /// First frame of the motion.
    pub onset: usize,
    pub apex: usize,
    /// Last frame of the motion.
    pub offset: usize,
    pub frames: Vec<GrayImage>,
}

impl SynthConfig {
    pub fn num_subjects(&self) -> usize {
        match self.pairing {
            Pairing::ForwardReverse => 2 * self.num_paths,
            Pairing::DistinctPaths => self.num_paths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_subjects() < 2 {
            return bad(format!("need at least 2 subjects, got {}", self.num_subjects()));
        }
        if self.clips_per_subject < 4 {
            return bad(format!(
                "need at least 4 clips per subject, got {}",
                self.clips_per_subject
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if self.motion_span < 2 || self.motion_span > self.window {
            return bad(format!(
                "motion span {} must lie in [2, window {}]",
                self.motion_span, self.window
            ));
        }
        if self.frame_size.0 < 8 || self.frame_size.1 < 8 {
            return bad(format!("frame size {:?} is too small", self.frame_size));
        }
        if !(self.blob_sigma > 0.0) || !(self.blob_amplitude > 0.0) {
            return bad("blob sigma and amplitude must be positive".into());
        }
        Ok(())
    }

    pub fn signatures(&self) -> Vec<SubjectSignature> {
        (0..self.num_subjects())
            .map(|s| {
                let (path_id, direction) = match self.pairing {
                    Pairing::ForwardReverse if s % 2 == 1 => (s / 2, Direction::Reverse),
                    Pairing::ForwardReverse => (s / 2, Direction::Forward),
                    Pairing::DistinctPaths => (s, Direction::Forward),
                };
                SubjectSignature {
                    subject_id: s as u64,
                    path_id,
                    direction,
                    motion_span: self.motion_span,
                    blob_sigma: self.blob_sigma,
                }
            })
            .collect()
    }

    /// Endpoints `((y0, x0), (y1, x1))` of path `p`. Paths sit in separate
    /// cells of a square grid, each at its own angle.
    pub fn path_endpoints(&self, path: usize) -> ((f64, f64), (f64, f64)) {
        let grid = (self.num_paths as f64).sqrt().ceil() as usize;
        let (h, w) = (self.frame_size.0 as f64, self.frame_size.1 as f64);
        let (cell_h, cell_w) = (h / grid as f64, w / grid as f64);
        let (row, col) = (path / grid, path % grid);
        let cy = (row as f64 + 0.5) * cell_h;
        let cx = (col as f64 + 0.5) * cell_w;
        let angle = std::f64::consts::PI * (0.25 + path as f64 / self.num_paths as f64);
        let half = 0.3 * cell_h.min(cell_w);
        let (dy, dx) = (half * angle.sin(), half * angle.cos());
        ((cy - dy, cx - dx), (cy + dy, cx + dx))
    }

    /// First motion frame before jitter.
    fn nominal_onset(&self) -> i64 {
        ((self.window - self.motion_span) / 2) as i64
    }

    fn jitter_range(&self) -> i64 {
        let slack = (self.window - self.motion_span) as i64;
        MAX_START_JITTER.min(slack / 2)
    }

    /// Jitter of clip `clip` of `subject`, a pure function of the seed.
    pub fn jitter_for(&self, subject: u64, clip: usize) -> Jitter {
        let mut rng = seed::rng(seed::derive(self.seed, &[subject, clip as u64]));
        let r = self.jitter_range();
        Jitter {
            start_offset: rng.random_range(-r..=r),
            amplitude_scale: 1.0 + rng.random_range(-AMPLITUDE_JITTER..=AMPLITUDE_JITTER),
            noise_seed: rng.random(),
        }
    }

    /// Onset frame for a jitter, clamped into the window.
    pub fn onset(&self, jitter: &Jitter) -> usize {
        let max = (self.window - self.motion_span) as i64;
        (self.nominal_onset() + jitter.start_offset).clamp(0, max) as usize
    }

    /// Blob centre `(y, x)` at frame `t`, or `None` outside the motion.
    pub fn blob_centre(
        &self,
        sig: &SubjectSignature,
        jitter: &Jitter,
        t: usize,
    ) -> Option<(f64, f64)> {
        let onset = self.onset(jitter);
        if t < onset || t >= onset + self.motion_span {
            return None;
        }
        let step = (t - onset) as f64 / (self.motion_span - 1) as f64;
        let frac = match sig.direction {
            Direction::Forward => step,
            Direction::Reverse => 1.0 - step,
        };
        let ((y0, x0), (y1, x1)) = self.path_endpoints(sig.path_id);
        Some((y0 + frac * (y1 - y0), x0 + frac * (x1 - x0)))
    }

    /// The static background shared by every clip.
    pub fn base_image(&self) -> Vec<f64> {
        let (h, w) = self.frame_size;
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let (sy, sx) = (0.45 * h as f64, 0.35 * w as f64);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / sy;
                let dx = (x as f64 + 0.5 - cx) / sx;
                let face = (-(dy * dy + dx * dx) / 2.0).exp();
                out.push(0.2 + 0.15 * face + 0.05 * (x as f64 / w as f64));
            }
        }
        out
    }

    /// Renders one clip.
    pub fn render(&self, sig: &SubjectSignature, jitter: &Jitter) -> Vec<GrayImage> {
        let (h, w) = self.frame_size;
        let base = self.base_image();
        let amplitude = self.blob_amplitude * jitter.amplitude_scale;
        let two_var = 2.0 * sig.blob_sigma * sig.blob_sigma;
        let mut rng = seed::rng(jitter.noise_seed);
        let noise = (self.noise_std > 0.0)
            .then(|| Normal::new(0.0, self.noise_std).expect("finite std"));
        (0..self.window)
            .map(|t| {
                let centre = self.blob_centre(sig, jitter, t);
                let mut px = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        let mut v = base[y * w + x];
                        if let Some((by, bx)) = centre {
                            let dy = y as f64 + 0.5 - by;
                            let dx = x as f64 + 0.5 - bx;
                            v += amplitude * (-(dy * dy + dx * dx) / two_var).exp();
                        }
                        if let Some(n) = &noise {
                            v += n.sample(&mut rng);
                        }
                        px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
                GrayImage::from_raw(w as u32, h as u32, px).expect("sized buffer")
            })
            .collect()
    }

    fn clip_id(subject: u64, clip: usize) -> String {
        format!("s{subject:02}_c{clip:03}")
    }

    /// Renders the whole dataset in memory, ordered by clip id.
    pub fn render_all(&self) -> Result<Vec<SynthClip>> {
        self.validate()?;
        let jobs: Vec<(SubjectSignature, usize)> = self
            .signatures()
            .into_iter()
            .flat_map(|s| (0..self.clips_per_subject).map(move |c| (s, c)))
            .collect();
        Ok(jobs
            .into_par_iter()
            .map(|(sig, c)| {
                let jitter = self.jitter_for(sig.subject_id, c);
                let onset = self.onset(&jitter);
                SynthClip {
                    clip_id: Self::clip_id(sig.subject_id, c),
                    signature: sig,
                    jitter,
                    onset,
                    apex: onset + (self.motion_span - 1) / 2,
                    offset: onset + self.motion_span - 1,
                    frames: self.render(&sig, &jitter),
                }
            })
            .collect())
    }

    /// Voxel mask `(T, H, W)` of the blob trajectory, dilated by
    /// `radius` pixels beyond `blob_sigma` in space and `margin` frames in
    /// time.
    pub fn tube_mask(&self, clip: &SynthClip, radius: f64, margin: usize) -> Vec<bool> {
        let (h, w) = self.frame_size;
        let reach = clip.signature.blob_sigma + radius;
        let mut mask = vec![false; self.window * h * w];
        for t in 0..self.window {
            // nearest motion frame within the temporal margin
            let lo = clip.onset.saturating_sub(margin);
            let hi = clip.offset + margin;
            if t < lo || t > hi {
                continue;
            }
            let src_t = t.clamp(clip.onset, clip.offset);
            let (by, bx) = self
                .blob_centre(&clip.signature, &clip.jitter, src_t)
                .expect("inside motion span");
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - by;
                    let dx = x as f64 + 0.5 - bx;
                    if dy * dy + dx * dx <= reach * reach {
                        mask[(t * h + y) * w + x] = true;
                    }
                }
            }
        }
        mask
    }
}

impl SynthClip {
    pub fn to_clip_tensor(&self, label: usize) -> Result<ClipTensor> {
        let frames: Vec<Frame> = self
            .frames
            .iter()
            .map(|img| {
                let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
                Frame::new(img.height() as usize, img.width() as usize, 1, 1.0, data)
            })
            .collect::<Result<_>>()?;
        ClipTensor::from_frames(&frames, label, self.clip_id.clone())
    }
}

/// Writes the dataset under `out_dir`: numbered PNG frames in
/// `clips/<clip_id>/`, `manifest.jsonl`, and `synth_config.json`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let clips = config.render_all()?;
    clips.par_iter().try_for_each(|clip| -> Result<()> {
        let dir = clips_dir.join(&clip.clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in clip.frames.iter().enumerate() {
            let path = dir.join(format!("{t:06}.png"));
            frame
                .save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
        }
        Ok(())
    })?;
    let records: Vec<ManifestRecord> = clips
        .iter()
        .map(|c| ManifestRecord {
            clip_id: c.clip_id.clone(),
            frame_dir: format!("clips/{}", c.clip_id),
            subject_id: c.signature.subject_id,
            apex_index: c.apex,
            onset_index: Some(c.onset),
            offset_index: Some(c.offset),
            crop_x: None,
            crop_y: None,
            crop_w: None,
            crop_h: None,
            dataset_name: "synth".into(),
        })
        .collect();
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    let config_path = out_dir.join("synth_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(&config_path, e))?;
    load_manifest_with(
        &manifest_path,
        &ManifestOptions {
            target_size: Some(config.frame_size),
        },
    )
}

/// Rank-1 test accuracy (percent) of a classifier that sees only the apex
/// frame of each clip: the slow pathway of `template` on one-frame input.
///
/// The manifest is split 50/50 with `seed`, which also seeds the model and
/// the solver.
pub fn static_baseline_accuracy(
    manifest: &DatasetManifest,
    template: &ModelConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<f64> {
    let (train, test) = split_dataset(manifest, 0.5, seed)?;
    if test.is_empty() {
        return Err(Error::Invalid("static baseline needs a nonempty test split".into()));
    }
    let channels = template.input_shape.channels;
    let train = load_clips(&train, 1, channels)?;
    let test = load_clips(&test, 1, channels)?;
    let config = static_config(template, manifest, seed);
    let solver = SolverConfig {
        seed: seed::derive(seed, &[1]),
        ..solver.clone()
    };
    let (model, _) = train_model(&config, &solver, &train, &[])?;
    Ok(evaluate_model(&model, &test)?.rank1)
}

/// Slow-pathway-only configuration for single-frame input.
pub fn static_config(template: &ModelConfig, manifest: &DatasetManifest, seed: u64) -> ModelConfig {
    ModelConfig {
        alpha: 1,
        layout: Layout::SlowOnly,
        num_classes: manifest.num_classes(),
        input_shape: InputShape {
            frames: 1,
            height: manifest.target_size.0,
            width: manifest.target_size.1,
            channels: template.input_shape.channels,
        },
        seed: seed::derive(seed, &[0]),
        ..template.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_paths: 2,
            clips_per_subject: 4,
            frame_size: (16, 16),
            window: 32,
            motion_span: 9,
            blob_sigma: 1.5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn defaults_give_eight_subjects() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.num_subjects(), 8);
        let sigs = cfg.signatures();
        let mut pairs: Vec<_> = sigs.iter().map(|s| (s.path_id, s.direction)).collect();
        pairs.sort_by_key(|&(p, d)| (p, d == Direction::Reverse));
        pairs.dedup();
        assert_eq!(pairs.len(), 8);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig { num_paths: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { clips_per_subject: 3, ..small() }.validate().is_err());
        assert!(SynthConfig { noise_std: -0.1, ..small() }.validate().is_err());
        assert!(SynthConfig { motion_span: 40, ..small() }.validate().is_err());
        let one = SynthConfig { num_paths: 1, pairing: Pairing::DistinctPaths, ..small() };
        assert!(one.validate().is_err());
        assert!(SynthConfig { num_paths: 1, ..small() }.validate().is_ok());
    }

    #[test]
    fn same_jitter_without_noise_is_identical() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let sig = cfg.signatures()[1];
        let j = cfg.jitter_for(1, 2);
        assert_eq!(cfg.render(&sig, &j), cfg.render(&sig, &j));
    }

    #[test]
    fn apex_frame_matches_between_directions() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let sigs = cfg.signatures();
        let j = Jitter::NONE;
        let fwd = cfg.render(&sigs[0], &j);
        let rev = cfg.render(&sigs[1], &j);
        let apex = cfg.onset(&j) + (cfg.motion_span - 1) / 2;
        assert_eq!(fwd[apex], rev[apex]);
        assert_ne!(fwd, rev);
        // Outside the motion every clip shows only the base image.
        assert_eq!(fwd[0], rev[0]);
    }

    #[test]
    fn reversed_forward_clip_follows_reverse_path() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let sigs = cfg.signatures();
        let fwd = Jitter { start_offset: 1, ..Jitter::NONE };
        // Reversal maps onset o to window - span - o.
        let mirrored = (cfg.window - cfg.motion_span) as i64 - cfg.onset(&fwd) as i64
            - cfg.nominal_onset();
        let rev = Jitter { start_offset: mirrored, ..Jitter::NONE };
        let a: Vec<_> = cfg.render(&sigs[0], &fwd).into_iter().rev().collect();
        let b = cfg.render(&sigs[1], &rev);
        assert_eq!(a, b);
    }

    #[test]
    fn apex_is_motion_midpoint() {
        let cfg = small();
        for clip in cfg.render_all().unwrap() {
            assert_eq!(clip.apex - clip.onset, clip.offset - clip.apex);
            assert_eq!(clip.frames.len(), cfg.window);
        }
    }

    #[test]
    fn tube_covers_blob_peak() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let clip = cfg.render_all().unwrap().remove(0);
        let mask = cfg.tube_mask(&clip, 0.0, 0);
        let (h, w) = cfg.frame_size;
        let t = clip.apex;
        let frame = clip.frames[t].as_raw();
        let peak = (0..h * w).max_by_key(|&i| frame[i]).unwrap();
        assert!(mask[t * h * w + peak]);
        assert!(!mask[..clip.onset * h * w].iter().any(|&m| m));
    }

    #[test]
    fn writes_dataset_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.num_classes(), 4);
        assert_eq!(m.len(), 16);
        assert!(m.entries.iter().all(|e| e.frame_count == cfg.window));
        assert!(dir.path().join("synth_config.json").exists());
        let clips = load_clips(&m, cfg.window, 1).unwrap();
        assert!(clips.iter().all(|c| c.frames == cfg.window));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small(), a.path()).unwrap();
        generate_dataset(&small(), b.path()).unwrap();
        for rel in ["manifest.jsonl", "synth_config.json", "clips/s01_c002/000012.png"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }
}
