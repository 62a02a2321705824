//! Named hyperparameter sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FastInput, InputShape, ModelConfig, Norm};
use crate::training::{Solver, SolverConfig};

/// A database-specific starting point for model and solver settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Samm,
    Casme2,
    #[default]
    Smic,
    /// Small network for the 64x64 grayscale synthetic clips.
    Synth,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "samm" => Ok(Preset::Samm),
            "casme2" | "casmeii" => Ok(Preset::Casme2),
            "smic" => Ok(Preset::Smic),
            "synth" | "synthetic" => Ok(Preset::Synth),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        let base = ModelConfig::default();
        let rgb = |side| InputShape { frames: 64, height: side, width: side, channels: 3 };
        match self {
            Preset::Samm => ModelConfig { alpha: 4, beta: 1.0 / 8.0, input_shape: rgb(400), ..base },
            Preset::Casme2 => ModelConfig { alpha: 4, beta: 1.0 / 8.0, input_shape: rgb(300), ..base },
            Preset::Smic => ModelConfig { alpha: 16, beta: 1.0 / 16.0, input_shape: rgb(150), ..base },
            Preset::Synth => ModelConfig {
                alpha: 4,
                beta: 1.0 / 8.0,
                base_channels: 16,
                stage_depths: vec![1, 1],
                num_classes: 8,
                input_shape: InputShape { frames: 64, height: 64, width: 64, channels: 1 },
                stem_stride: 4,
                norm: Norm::LayerRms,
                fast_input: FastInput::MedianRemoved,
                ..base
            },
        }
    }

    pub fn solver(self) -> SolverConfig {
        let base = SolverConfig { solver: Solver::Adam, learning_rate: 1e-3, ..SolverConfig::default() };
        match self {
            Preset::Samm | Preset::Casme2 => SolverConfig { batch_size: 16, ..base },
            Preset::Smic => SolverConfig { batch_size: 32, ..base },
            Preset::Synth => SolverConfig { batch_size: 16, epochs: 30, ..base },
        }
    }
}
