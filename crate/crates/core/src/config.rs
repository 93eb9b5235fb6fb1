//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::imagecore::ContourConfig;
use crate::mae::MaeConfig;
use crate::reid::ReidConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub drop_same_camera: bool,
    /// Monte-Carlo draws for the random-feature baseline.
    pub chance_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            drop_same_camera: true,
            chance_trials: 50,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected.
///
/// `seed` is the only seed: [`RunConfig::finalize`] copies it into every
/// section, and each consumer derives its own named stream from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub data: SyntheticSpec,
    pub contour: ContourConfig,
    pub mae: MaeConfig,
    pub reid: ReidConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
            data: SyntheticSpec::default(),
            contour: ContourConfig::default(),
            mae: MaeConfig::default(),
            reid: ReidConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Propagates the root seed and validates every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.set_seed(self.seed);
        self.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.mae.seed = seed;
        self.reid.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.mae.validate()?;
        self.reid.validate()?;
        if self.data.image_size != self.mae.image_size {
            return Err(Error::config(
                "data.image_size",
                format!(
                    "{} differs from mae.image_size {}",
                    self.data.image_size, self.mae.image_size
                ),
            ));
        }
        if self.eval.chance_trials == 0 {
            return Err(Error::config("eval.chance_trials", "must be positive"));
        }
        Ok(())
    }
}
