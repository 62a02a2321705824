//! Run configurations: flags resolved against presets, then overridden by
//! an optional JSON file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use microid::data::{load_manifest_with, DatasetManifest, ManifestOptions};
use microid::model::{FastInput, InputShape, ModelConfig, Norm};
use microid::presets::Preset;
use microid::seed;
use microid::training::{Solver, SolverConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{DataArgs, ModelArgs};

/// Accepts `0.125` as well as `1/8`.
pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let value = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let d: f64 = d.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            n / d
        }
        None => s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("{s:?} is not a finite number"))
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else is replaced.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the `--config` file, if any, to a run configuration.
pub fn with_overrides<T: Serialize + DeserializeOwned>(run: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(run) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !patch.is_object() {
        bail!("{}: config file must hold a JSON object", path.display());
    }
    let mut value = serde_json::to_value(run)?;
    merge(&mut value, patch);
    serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))
}

pub fn resolve(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

/// Where clips come from and how they are split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Resize target; `None` uses the database default.
    pub target_size: Option<(usize, usize)>,
    pub window: usize,
    pub channels: usize,
}

impl DataConfig {
    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        let options = ManifestOptions { target_size: self.target_size };
        load_manifest_with(&self.manifest, &options)
            .with_context(|| format!("loading manifest {}", self.manifest.display()))
    }
}

pub fn data_config(args: &DataArgs, root: Option<&Path>, seed: u64) -> DataConfig {
    DataConfig {
        manifest: resolve(&args.manifest, root),
        split_ratio: args.split_ratio,
        split_seed: args.split_seed.unwrap_or(seed),
        target_size: args.size.map(|s| (s, s)),
        window: 64,
        channels: 3,
    }
}

/// Peeks at the manifest's database name to choose a preset.
pub fn preset_for(args: &ModelArgs, manifest: &Path) -> Result<Preset> {
    if let Some(name) = &args.preset {
        return Ok(name.parse()?);
    }
    let text = std::fs::read_to_string(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("{}");
    let name = serde_json::from_str::<Value>(first)
        .ok()
        .and_then(|v| v.get("dataset_name").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_default();
    let key: String = name.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_lowercase();
    Ok(if key.starts_with("samm") {
        Preset::Samm
    } else if key.starts_with("casme") {
        Preset::Casme2
    } else if key.starts_with("synth") {
        Preset::Synth
    } else {
        Preset::Smic
    })
}

/// Preset values with any explicit flags applied. Seeds derive from
/// `args.seed`; `num_classes` and `input_shape` are filled in later from
/// the data.
pub fn model_and_solver(args: &ModelArgs, preset: Preset) -> Result<(ModelConfig, SolverConfig)> {
    let mut model = preset.model();
    let mut solver = preset.solver();
    if let Some(v) = args.alpha {
        model.alpha = v;
    }
    if let Some(v) = args.beta {
        model.beta = v;
    }
    if let Some(v) = args.base_channels {
        model.base_channels = v;
    }
    if let Some(v) = &args.depths {
        model.stage_depths = v.clone();
    }
    if let Some(v) = args.stem_stride {
        model.stem_stride = v;
    }
    if let Some(v) = &args.norm {
        model.norm = parse_enum::<Norm>(v, "norm")?;
    }
    if let Some(v) = &args.fast_input {
        model.fast_input = parse_enum::<FastInput>(v, "fast input")?;
    }
    if let Some(v) = args.window {
        model.input_shape.frames = v;
    }
    if let Some(v) = args.channels {
        model.input_shape.channels = v;
    }
    model.seed = seed::derive(args.seed, &[0]);
    if let Some(v) = &args.solver {
        solver.solver = v.parse::<Solver>()?;
    }
    if let Some(v) = args.lr {
        solver.learning_rate = v;
    }
    if let Some(v) = args.batch {
        solver.batch_size = v;
    }
    if let Some(v) = args.epochs {
        solver.epochs = v;
    }
    if let Some(v) = args.weight_decay {
        solver.weight_decay = v;
    }
    solver.seed = seed::derive(args.seed, &[1]);
    Ok((model, solver))
}

fn parse_enum<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(text.to_owned()))
        .with_context(|| format!("unknown {what} {text:?}"))
}

/// Sets the data-dependent parts of a model configuration.
pub fn fit_to_data(model: &mut ModelConfig, data: &DataConfig, manifest: &DatasetManifest) {
    model.num_classes = manifest.num_classes();
    model.input_shape = InputShape {
        frames: data.window,
        height: manifest.target_size.0,
        width: manifest.target_size.1,
        channels: data.channels,
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ratios_parse_in_both_forms() {
        assert_eq!(parse_ratio("1/8").unwrap(), 0.125);
        assert_eq!(parse_ratio("0.0625").unwrap(), 0.0625);
        assert!(parse_ratio("1/0").is_err());
        assert!(parse_ratio("x").is_err());
    }

    #[test]
    fn merge_overrides_nested_fields_only() {
        let mut base = json!({"model": {"alpha": 4, "beta": 0.125}, "out_dir": "a"});
        merge(&mut base, json!({"model": {"alpha": 16}, "extra": 1}));
        assert_eq!(base, json!({"model": {"alpha": 16, "beta": 0.125}, "out_dir": "a", "extra": 1}));
    }
}
