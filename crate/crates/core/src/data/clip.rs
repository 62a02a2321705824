use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::frame::{preprocess_frames, Frame};
use super::manifest::{DatasetManifest, ManifestEntry};
use super::window::apex_window_indices;
use crate::error::{Error, Result};

/// Magic bytes opening a packed tensor file.
pub const PACKED_MAGIC: &[u8; 8] = b"MXIDTNSR";
const PACKED_VERSION: u8 = 1;

/// A fixed-length normalized clip, laid out `T x H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Compact subject label.
    pub label: usize,
    pub clip_id: String,
}

impl ClipTensor {
    pub fn new(
        shape: [usize; 4],
        data: Vec<f32>,
        label: usize,
        clip_id: impl Into<String>,
    ) -> Result<Self> {
        let [frames, height, width, channels] = shape;
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("clips need 1 or 3 channels, got {channels}")));
        }
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty clip shape {shape:?}")));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "clip data has {} values, shape {shape:?} needs {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("clip value {bad} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            label,
            clip_id: clip_id.into(),
        })
    }

    /// Builds a clip from normalized frames of identical size.
    pub fn from_frames(frames: &[Frame], label: usize, clip_id: impl Into<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invalid("clip has no frames".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.height, f.width, f.channels) != (first.height, first.width, first.channels) {
                return Err(Error::Shape("frames of one clip differ in size".into()));
            }
            if f.max_value != 1.0 {
                return Err(Error::Invalid("clip frames must be normalized".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Self::new(
            [frames.len(), first.height, first.width, first.channels],
            data,
            label,
            clip_id,
        )
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Samples of frame `t`, `H x W x C`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_frame(&self, t: usize) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            max_value: 1.0,
            data: self.frame(t).to_vec(),
        }
    }

    /// The same clip with its frame order reversed.
    pub fn reversed(&self) -> ClipTensor {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.frames).rev() {
            data.extend_from_slice(self.frame(t));
        }
        ClipTensor {
            data,
            clip_id: format!("{}-reversed", self.clip_id),
            ..self.clone()
        }
    }

    /// A one-frame clip holding frame `t`.
    pub fn single_frame(&self, t: usize) -> ClipTensor {
        ClipTensor {
            frames: 1,
            data: self.frame(t).to_vec(),
            ..self.clone()
        }
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        write_packed(path, self.shape(), &self.data)
    }

    pub fn load_packed(path: &Path, label: usize, clip_id: impl Into<String>) -> Result<Self> {
        let (shape, data) = read_packed(path)?;
        Self::new(shape, data, label, clip_id)
    }
}

/// Writes a packed tensor: 8-byte magic, version byte, four little-endian
/// `u32` dimensions `(T, H, W, C)`, then `f32` little-endian samples.
pub fn write_packed(path: &Path, shape: [usize; 4], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!(
            "packed tensor shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 1 + 16 + data.len() * 4);
    buf.extend_from_slice(PACKED_MAGIC);
    buf.push(PACKED_VERSION);
    for d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
    if buf.len() < 25 || &buf[..8] != PACKED_MAGIC {
        return Err(bad("not a packed tensor file"));
    }
    if buf[8] != PACKED_VERSION {
        return Err(bad(&format!("unsupported packed tensor version {}", buf[8])));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let at = 9 + 4 * i;
        *d = u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes")) as usize;
    }
    let body = &buf[25..];
    if body.len() != shape.iter().product::<usize>() * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

/// Reads, preprocesses and windows one manifest entry.
///
/// Only the frames the apex window needs are decoded.
pub fn load_clip(
    entry: &ManifestEntry,
    target_size: (usize, usize),
    window: usize,
    channels: usize,
) -> Result<ClipTensor> {
    let indices = apex_window_indices(entry.frame_count, entry.apex_index, window)
        .map_err(|e| Error::Manifest(format!("clip {}: {e}", entry.clip_id)))?;
    let mut wanted: Vec<usize> = indices.clone();
    wanted.sort_unstable();
    wanted.dedup();
    let mut raw = Vec::with_capacity(wanted.len());
    for &i in &wanted {
        let path = entry.frame_path(i);
        let img = image::open(&path).map_err(|e| Error::Image { path, source: e })?;
        raw.push(Frame::from_image(&img, channels)?);
    }
    let prepared = preprocess_frames(&raw, entry.crop_rect, target_size)
        .map_err(|e| Error::Invalid(format!("clip {}: {e}", entry.clip_id)))?;
    let slot: BTreeMap<usize, usize> = wanted.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let ordered: Vec<Frame> = indices.iter().map(|i| prepared[slot[i]].clone()).collect();
    ClipTensor::from_frames(&ordered, entry.label, entry.clip_id.clone())
}

/// Loads every clip of a manifest, in manifest order.
pub fn load_clips(
    manifest: &DatasetManifest,
    window: usize,
    channels: usize,
) -> Result<Vec<ClipTensor>> {
    manifest
        .entries
        .par_iter()
        .map(|e| load_clip(e, manifest.target_size, window, channels))
        .collect()
}
