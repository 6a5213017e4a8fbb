//! TOML run configuration.
//!
//! ```toml
//! [paths]
//! data_dir = "data"
//! out_dir = "runs"
//!
//! [data]
//! scenes = 10
//! ratio = "1/4"
//!
//! [train]
//! epochs_student = 12
//! heads = { nmh = true, lrd = true, crc = true }
//! ```
//!
//! Every field is optional and falls back to its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nucseg::model::checkpoint::hex_digest;
use nucseg::pipeline::{DataConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => nucseg::Error::MissingArtifact(path.to_path_buf()).into(),
            _ => CliError::Core(e.into()),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.train.validate().map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }
}

/// Short content hash of everything that determines a run's results.
pub fn config_hash(data: &DataConfig, train: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(&(data, train)).expect("configs serialize");
    hex_digest(&bytes)[..12].to_string()
}
