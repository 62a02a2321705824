use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::CropRect;
use crate::error::{Error, Result};

/// One manifest line as stored on disk (JSON lines).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub frame_dir: String,
    pub subject_id: u64,
    pub apex_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_x: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_y: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_h: Option<u32>,
    pub dataset_name: String,
}

/// A validated clip description with resolved paths and a compact label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frame_source: PathBuf,
    /// Number of numbered frame files found under `frame_source`.
    pub frame_count: usize,
    /// Subject identifier as written in the manifest.
    pub subject_id: u64,
    /// Compact label in `0..K`.
    pub label: usize,
    pub apex_index: usize,
    pub onset_index: Option<usize>,
    pub offset_index: Option<usize>,
    pub crop_rect: Option<CropRect>,
    pub dataset_name: String,
}

impl ManifestEntry {
    /// Path of frame `index` (`000000.png`, `000001.png`, ...).
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.frame_source.join(format!("{index:06}.png"))
    }

    pub fn to_record(&self) -> ManifestRecord {
        ManifestRecord {
            clip_id: self.clip_id.clone(),
            frame_dir: self.frame_source.to_string_lossy().into_owned(),
            subject_id: self.subject_id,
            apex_index: self.apex_index,
            onset_index: self.onset_index,
            offset_index: self.offset_index,
            crop_x: self.crop_rect.map(|r| r.x),
            crop_y: self.crop_rect.map(|r| r.y),
            crop_w: self.crop_rect.map(|r| r.width),
            crop_h: self.crop_rect.map(|r| r.height),
            dataset_name: self.dataset_name.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Sorted by `clip_id`.
    pub entries: Vec<ManifestEntry>,
    /// `(height, width)` every frame is resized to.
    pub target_size: (usize, usize),
    /// Original subject id to compact label.
    pub label_map: BTreeMap<u64, usize>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries grouped by compact label.
    pub fn by_label(&self) -> BTreeMap<usize, Vec<&ManifestEntry>> {
        let mut groups: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            groups.entry(e.label).or_default().push(e);
        }
        groups
    }

    /// A manifest over a subset of entries that keeps this manifest's labels.
    pub fn subset(&self, mut entries: Vec<ManifestEntry>) -> DatasetManifest {
        entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        DatasetManifest {
            entries,
            target_size: self.target_size,
            label_map: self.label_map.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ManifestOptions {
    /// Overrides the per-database resize target.
    pub target_size: Option<(usize, usize)>,
}

/// Per-database frame size: SMIC 150, CASME II 300, SAMM 400 (square).
pub fn native_target_size(dataset_name: &str) -> Option<(usize, usize)> {
    let key: String = dataset_name
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if key.starts_with("SMIC") {
        Some((150, 150))
    } else if key.starts_with("CASME") {
        Some((300, 300))
    } else if key.starts_with("SAMM") {
        Some((400, 400))
    } else {
        None
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, &ManifestOptions::default())
}

/// Reads and validates a JSON-lines manifest. Relative `frame_dir` values are
/// resolved against the manifest's directory.
pub fn load_manifest_with(path: &Path, options: &ManifestOptions) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(rec);
    }
    from_records(records, base, options)
}

/// Validates records and builds a manifest (see [`load_manifest_with`]).
pub fn from_records(
    mut records: Vec<ManifestRecord>,
    base: &Path,
    options: &ManifestOptions,
) -> Result<DatasetManifest> {
    if records.is_empty() {
        return Err(Error::Manifest("manifest has no entries".into()));
    }
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    for pair in records.windows(2) {
        if pair[0].clip_id == pair[1].clip_id {
            return Err(Error::Manifest(format!("duplicate clip_id {:?}", pair[0].clip_id)));
        }
    }

    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.subject_id).or_default() += 1;
    }
    let label_map: BTreeMap<u64, usize> =
        counts.keys().enumerate().map(|(i, &s)| (s, i)).collect();
    if let Some((s, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Manifest(format!(
            "subject {s} has a single clip; it cannot appear in both train and test"
        )));
    }

    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        entries.push(validate_record(r, base, &label_map)?);
    }

    let target_size = match options.target_size {
        Some(t) if t.0 > 0 && t.1 > 0 => t,
        Some(t) => return Err(Error::Manifest(format!("target size {t:?} must be positive"))),
        None => infer_target_size(&entries)?,
    };

    Ok(DatasetManifest {
        entries,
        target_size,
        label_map,
    })
}

fn validate_record(
    r: ManifestRecord,
    base: &Path,
    label_map: &BTreeMap<u64, usize>,
) -> Result<ManifestEntry> {
    let dir = PathBuf::from(&r.frame_dir);
    let frame_source = if dir.is_absolute() { dir } else { base.join(dir) };
    let frame_count = count_frames(&frame_source)?;
    let clip = &r.clip_id;
    if r.apex_index >= frame_count {
        return Err(Error::Manifest(format!(
            "clip {clip}: apex out of range ({} not in [0, {frame_count}))",
            r.apex_index
        )));
    }
    if let Some(on) = r.onset_index {
        if on > r.apex_index {
            return Err(Error::Manifest(format!("clip {clip}: onset {on} after apex")));
        }
    }
    if let Some(off) = r.offset_index {
        if off < r.apex_index || off >= frame_count {
            return Err(Error::Manifest(format!("clip {clip}: offset {off} out of range")));
        }
    }
    let crop_rect = match (r.crop_x, r.crop_y, r.crop_w, r.crop_h) {
        (Some(x), Some(y), Some(width), Some(height)) => Some(CropRect { x, y, width, height }),
        (None, None, None, None) => None,
        _ => {
            return Err(Error::Manifest(format!(
                "clip {clip}: crop fields must be given all together or not at all"
            )))
        }
    };
    Ok(ManifestEntry {
        label: label_map[&r.subject_id],
        clip_id: r.clip_id,
        frame_source,
        frame_count,
        subject_id: r.subject_id,
        apex_index: r.apex_index,
        onset_index: r.onset_index,
        offset_index: r.offset_index,
        crop_rect,
        dataset_name: r.dataset_name,
    })
}

/// Counts `NNNNNN.png` files, which must be numbered contiguously from zero.
fn count_frames(dir: &Path) -> Result<usize> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = BTreeSet::new();
    for item in listing {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let path = item.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if let Ok(i) = stem.parse::<usize>() {
            indices.insert(i);
        }
    }
    let n = indices.len();
    if n == 0 {
        return Err(Error::Manifest(format!("no frames found in {}", dir.display())));
    }
    if indices.last() != Some(&(n - 1)) {
        return Err(Error::Manifest(format!(
            "frames in {} are not numbered contiguously from 000000",
            dir.display()
        )));
    }
    Ok(n)
}

fn infer_target_size(entries: &[ManifestEntry]) -> Result<(usize, usize)> {
    let names: BTreeSet<&str> = entries.iter().map(|e| e.dataset_name.as_str()).collect();
    let sizes: BTreeSet<Option<(usize, usize)>> =
        names.iter().map(|n| native_target_size(n)).collect();
    if sizes.len() > 1 {
        return Err(Error::Manifest(format!(
            "datasets {names:?} use different frame sizes; pass an explicit target size"
        )));
    }
    if let Some(Some(size)) = sizes.into_iter().next() {
        return Ok(size);
    }
    // Unknown database: keep the frames' own size.
    let first = &entries[0];
    let path = first.frame_path(0);
    let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Image { path, source: e })?;
    Ok((h as usize, w as usize))
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
