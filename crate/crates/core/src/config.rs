//! The run configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::policy::ModelConfig;
use crate::simulator::EnvironmentSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub output_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvironmentSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::new(),
            message: e.message().to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: String::new(),
            message: e.to_string(),
        })
    }

    /// Checks cross-field constraints that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(1..=crate::geo::AOI_LEVELS).contains(&self.model.aoi_level) {
            return Err(Error::Config {
                path: "model.aoi_level".into(),
                message: format!("must be in 1..={}", crate::geo::AOI_LEVELS),
            });
        }
        if self.eval.seeds.is_empty() || self.eval.sessions_per_seed == 0 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "needs at least one seed and one session".into(),
            });
        }
        if self.eval.ndcg_ks.contains(&0) || self.eval.hit_k == 0 {
            return Err(Error::Config {
                path: "eval".into(),
                message: "cutoffs must be >= 1".into(),
            });
        }
        Ok(())
    }
}
