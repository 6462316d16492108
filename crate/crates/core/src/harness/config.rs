//! Run configuration: one TOML file governs a run. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dehaze::TrainConfig;
use crate::detect::ToyDetectorConfig;
use crate::error::{Error, Result};
use crate::metrics::{MatchConfig, SsimParams};
use crate::pipeline::PipelineConfig;
use crate::scatter::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Test images rendered under the out-of-distribution scene spec.
    pub ood_test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
            ood_test: 50,
        }
    }
}

/// Evaluation knobs that are not part of any single stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also report PSNR against 255 after byte quantization.
    pub psnr_bytes: bool,
    /// Per-image PSNR cap (dB) applied before averaging, so identical pairs
    /// do not make the mean infinite.
    pub psnr_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            psnr_bytes: false,
            psnr_cap: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Drives scene synthesis and, through [`RunConfig::effective`],
    /// the training seed.
    pub seed: u64,
    pub scene: SceneSpec,
    /// Scene spec for the out-of-distribution test manifest.
    pub ood_scene: SceneSpec,
    pub dataset: DatasetCounts,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub detector: ToyDetectorConfig,
    pub matching: MatchConfig,
    pub ssim: SsimParams,
    pub eval: EvalConfig,
}

/// Denser, whiter fog than the default spec, with fewer and smaller objects.
pub fn default_ood_scene() -> SceneSpec {
    SceneSpec {
        beta_min: 1.0,
        beta_max: 1.8,
        airlight_min: 0.85,
        airlight_max: 0.98,
        max_object_size: 12,
        background_level: 0.24,
        ..SceneSpec::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            ood_scene: default_ood_scene(),
            dataset: DatasetCounts::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            detector: ToyDetectorConfig::default(),
            matching: MatchConfig::default(),
            ssim: SsimParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.scene.validate().map_err(cfg_err)?;
        self.ood_scene.validate().map_err(cfg_err)?;
        self.train.validate()?;
        self.pipeline.validate()?;
        self.matching.validate().map_err(cfg_err)?;
        if !(self.eval.psnr_cap > 0.0) {
            return Err(Error::Config("eval.psnr_cap must be positive".into()));
        }
        if self.ssim.dynamic_range <= 0.0 {
            return Err(Error::Config("ssim.dynamic_range must be positive".into()));
        }
        Ok(())
    }

    /// The configuration actually used: the master seed replaces the
    /// training seed.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Reads a TOML config; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_toml(&text)
        }
    }
}
