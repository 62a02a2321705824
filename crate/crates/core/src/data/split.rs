use rand::seq::SliceRandom;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed;

/// Stratified per-subject split into `(train, test)`.
///
/// Each subject's clips are shuffled with a generator keyed by `seed` and the
/// subject label, and the first `round(ratio * count)` go to training,
/// clamped so both partitions keep at least one clip of every subject.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut clips) in manifest.by_label() {
        if clips.len() < 2 {
            return Err(Error::Invalid(format!(
                "subject with label {label} has {} clip(s); at least 2 are needed",
                clips.len()
            )));
        }
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let mut rng = seed::rng(seed::derive(seed, &[label as u64]));
        clips.shuffle(&mut rng);
        let n_train = ((ratio * clips.len() as f64).round() as usize).clamp(1, clips.len() - 1);
        train.extend(clips[..n_train].iter().map(|&e| e.clone()));
        test.extend(clips[n_train..].iter().map(|&e| e.clone()));
    }
    Ok((manifest.subset(train), manifest.subset(test)))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use super::*;
    use crate::data::ManifestEntry;

    fn manifest(subjects: usize, clips: usize) -> DatasetManifest {
        let entries = (0..subjects)
            .flat_map(|s| {
                (0..clips).map(move |c| ManifestEntry {
                    clip_id: format!("s{s}_c{c}"),
                    frame_source: PathBuf::from("unused"),
                    frame_count: 1,
                    subject_id: s as u64,
                    label: s,
                    apex_index: 0,
                    onset_index: None,
                    offset_index: None,
                    crop_rect: None,
                    dataset_name: "toy".into(),
                })
            })
            .collect();
        DatasetManifest {
            entries,
            target_size: (1, 1),
            label_map: (0..subjects).map(|s| (s as u64, s)).collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn two_clips_split_one_each() {
        let (tr, te) = split_dataset(&manifest(1, 2), 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn four_by_four_halves() {
        let (tr, te) = split_dataset(&manifest(4, 4), 0.5, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 8));
        for part in [&tr, &te] {
            for (_, clips) in part.by_label() {
                assert_eq!(clips.len(), 2);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let m = manifest(3, 10);
        assert_eq!(split_dataset(&m, 0.5, 9).unwrap(), split_dataset(&m, 0.5, 9).unwrap());
        assert_ne!(split_dataset(&m, 0.5, 9).unwrap(), split_dataset(&m, 0.5, 10).unwrap());
    }

    #[test]
    fn extreme_ratio_keeps_both_sides() {
        let (tr, te) = split_dataset(&manifest(2, 5), 0.01, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 8));
        assert!(split_dataset(&manifest(2, 5), 1.0, 0).is_err());
    }

    #[test]
    fn singleton_subject_rejected() {
        assert!(split_dataset(&manifest(2, 1), 0.5, 0).is_err());
    }
}
