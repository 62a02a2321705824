use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip shape a model accepts: `frames x height x width x channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn as_array(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

/// Which pathways a network has.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Slow and fast pathways joined by lateral connections.
    #[default]
    SlowFast,
    /// The slow pathway alone (used for the single-frame control).
    SlowOnly,
}

/// Normalization applied after every convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    /// Per-sample, per-channel standardization over time and space.
    #[default]
    Instance,
    /// Per-sample, per-channel scaling to unit root-mean-square.
    Rms,
    /// Per-sample scaling of the whole layer to unit root-mean-square.
    LayerRms,
}

/// Preprocessing of the fast pathway input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastInput {
    #[default]
    Raw,
    /// Each pixel minus its mean over time.
    MeanRemoved,
    /// Each pixel minus its median over time.
    MedianRemoved,
}

/// Selects one of the two pathways.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Slow,
    Fast,
}

impl std::str::FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slow" => Ok(Pathway::Slow),
            "fast" => Ok(Pathway::Fast),
            other => Err(Error::Config(format!("unknown pathway {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `alpha` is the fast/slow frame ratio (the slow pathway sees every
/// `alpha`-th frame) and `beta` the fast/slow channel ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub alpha: usize,
    pub beta: f64,
    /// Width of the slow stem; stage `i` of the slow pathway has
    /// `base_channels << i` channels.
    pub base_channels: usize,
    pub stage_depths: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: InputShape,
    /// Spatial stride of both stems.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub fast_input: FastInput,
    pub seed: u64,
}

fn default_stem_stride() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 16,
            beta: 1.0 / 16.0,
            base_channels: 32,
            stage_depths: vec![1, 1, 1],
            num_classes: 2,
            input_shape: InputShape {
                frames: 64,
                height: 150,
                width: 150,
                channels: 3,
            },
            stem_stride: default_stem_stride(),
            layout: Layout::SlowFast,
            norm: Norm::Instance,
            fast_input: FastInput::Raw,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn slow_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn fast_width(&self, stage: usize) -> usize {
        (self.beta * self.slow_width(stage) as f64).round() as usize
    }

    pub fn slow_frames(&self) -> usize {
        self.input_shape.frames / self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.input_shape;
        if s.frames == 0 || s.height == 0 || s.width == 0 {
            return bad(format!("input shape {s:?} has an empty dimension"));
        }
        if s.channels != 1 && s.channels != 3 {
            return bad(format!("input must have 1 or 3 channels, got {}", s.channels));
        }
        if self.alpha == 0 || s.frames % self.alpha != 0 {
            return bad(format!(
                "alpha {} must divide the window length {}",
                self.alpha, s.frames
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta {} must lie in (0, 1]", self.beta));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.stage_depths.is_empty() || self.stage_depths.contains(&0) {
            return bad(format!(
                "stage depths {:?} must be nonempty and positive",
                self.stage_depths
            ));
        }
        if self.num_stages() > 8 {
            return bad("at most 8 stages are supported".into());
        }
        if self.layout == Layout::SlowFast {
            if let Some(stage) = (0..self.num_stages()).find(|&i| self.fast_width(i) == 0) {
                return bad(format!(
                    "beta {} leaves stage {stage} of the fast pathway without channels",
                    self.beta
                ));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_must_divide_window() {
        let cfg = ModelConfig { alpha: 3, ..ModelConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("alpha"));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn beta_must_leave_fast_channels() {
        let cfg = ModelConfig { beta: 1.0 / 128.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { beta: 0.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn widths_follow_ratio() {
        let cfg = ModelConfig { base_channels: 32, beta: 0.125, ..ModelConfig::default() };
        assert_eq!(
            (0..3).map(|i| (cfg.slow_width(i), cfg.fast_width(i))).collect::<Vec<_>>(),
            [(32, 4), (64, 8), (128, 16)]
        );
    }

    #[test]
    fn single_class_rejected() {
        let cfg = ModelConfig { num_classes: 1, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
