//! One TOML file holding every tunable: architecture, tracking, the
//! untrained preset and fusion training. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfm::SgdSchedule;
use crate::error::{Error, Result};
use crate::model::{ModelArch, PresetConfig};
use crate::pipeline::TrackConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: SgdSchedule,
    /// Fusion samples drawn from each training sequence.
    pub samples_per_sequence: usize,
    /// Largest offset of a sample's crop centre from the target, in
    /// search-crop pixels.
    pub max_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: SgdSchedule::default(),
            samples_per_sequence: 40,
            max_shift: 24.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelArch,
    pub track: TrackConfig,
    pub preset: PresetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.track.validate(self.model.stride())?;
        self.train.schedule.validate().map_err(|e| match e {
            Error::Train(m) => Error::Config(format!("train.schedule: {m}")),
            other => other,
        })?;
        if self.train.samples_per_sequence == 0 {
            return Err(Error::Config("train.samples_per_sequence must be positive".into()));
        }
        if !(self.train.max_shift >= 0.0) {
            return Err(Error::Config(format!("train.max_shift {} must be non-negative", self.train.max_shift)));
        }
        if !(self.preset.temperature > 0.0) || !self.preset.threshold.is_finite() {
            return Err(Error::Config(format!("preset {:?} needs a positive temperature", self.preset)));
        }
        Ok(())
    }
}
