//! Experiment configuration: a TOML file whose keys can all be overridden
//! by flags.
//!
//! ```toml
//! seed = 0
//! data_root = "data"
//! runs_dir = "runs"
//! denoiser = "tiny"
//! extractor = "pixel_stats"
//!
//! [schedule]
//! timesteps = 1000
//! beta_start = 1e-4
//! beta_end = 0.02
//!
//! [diffusion]          # training of the generative model
//! epochs = 50
//! batch_size = 16
//! learning_rate = 1e-4
//! snapshot_epochs = [1, 5, 10]
//!
//! [classifier]
//! architecture = "resnet8_tiny"
//! epochs = 30
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svpgen::classify::ClassifierConfig;
use svpgen::denoiser::DenoiserConfig;
use svpgen::diffusion::TrainConfig;
use svpgen::error::{Error, Result};
use svpgen::frechet::FeatureExtractor;
use svpgen::schedule::ScheduleParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root that relative manifest paths resolve against.
    pub data_root: PathBuf,
    /// Parent of content-addressed run directories.
    pub runs_dir: PathBuf,
    /// Single seed of the run; copied into every component config.
    pub seed: u64,
    pub schedule: ScheduleParams,
    /// Denoiser preset name.
    pub denoiser: String,
    pub diffusion: TrainConfig,
    pub classifier: ClassifierConfig,
    /// FID feature extractor name.
    pub extractor: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("."),
            runs_dir: PathBuf::from("runs"),
            seed: 0,
            schedule: ScheduleParams::default(),
            denoiser: "default".into(),
            diffusion: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            extractor: "pixel_stats".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        toml::from_str(&text).map_err(|e| Error::Param(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed and checks that every referenced preset
    /// exists.
    pub fn finish(mut self) -> Result<Self> {
        self.diffusion.seed = self.seed;
        self.classifier.seed = self.seed;
        DenoiserConfig::preset(&self.denoiser)?;
        if self.extractor != "imported" {
            FeatureExtractor::by_name(&self.extractor)?;
        }
        self.diffusion.validate()?;
        self.classifier.validate()?;
        svpgen::schedule::NoiseSchedule::new(self.schedule)?;
        Ok(self)
    }
}
