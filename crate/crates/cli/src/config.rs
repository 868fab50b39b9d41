//! Training configuration file (TOML). Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volseg::data::DatasetFormat;
use volseg::losses::LossConfig;
use volseg::network::ModelConfig;
use volseg::optim::ScheduleConfig;
use volseg::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Save `checkpoints/epoch_NNNN.ckpt` every this many epochs; 0 keeps
    /// only the final checkpoint.
    pub checkpoint_every: usize,
    /// Share of cases held out for validation, chosen by id hash.
    pub validation_fraction: f64,
    /// Random intensity scale/shift and mirror flips on training crops.
    pub augment: bool,
    /// Run directory; relative paths resolve against the config file.
    pub run_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// `total_epochs` is the number of training epochs.
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 1,
            checkpoint_every: 10,
            validation_fraction: 0.2,
            augment: true,
            run_dir: PathBuf::from("run"),
            dataset: DatasetConfig { path: PathBuf::from("data"), format: DatasetFormat::Native },
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path` and make `run_dir` and `dataset.path` absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = fs::canonicalize(base)?;
        cfg.run_dir = base.join(&cfg.run_dir);
        cfg.dataset.path = base.join(&cfg.dataset.path);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn epochs(&self) -> usize {
        self.schedule.total_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        Ok(())
    }
}
