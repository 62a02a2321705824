//! Dataset manifests, frame preprocessing, apex-centred windowing and the
//! per-subject train/test split.

mod clip;
mod frame;
mod manifest;
mod split;
mod window;

pub use clip::{load_clip, load_clips, read_packed, write_packed, ClipTensor, PACKED_MAGIC};
pub use frame::{preprocess_frames, CropRect, Frame};
pub use manifest::{
    from_records, load_manifest, load_manifest_with, native_target_size, write_manifest, DatasetManifest,
    ManifestEntry, ManifestOptions, ManifestRecord,
};
pub use split::split_dataset;
pub use window::{apex_window, apex_window_indices, pad_to_window, pad_to_window_indices};

/// Default temporal window length, in frames.
pub const DEFAULT_WINDOW: usize = 64;
