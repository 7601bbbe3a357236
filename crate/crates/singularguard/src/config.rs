//! Application configuration: a single TOML file wiring every module.
//!
//! Every block is optional and falls back to the built-in defaults, so
//! an empty file — or no file at all — yields a fully working setup.
//! Unknown keys are rejected everywhere to catch typos, and each block
//! re-runs its own validation on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::{FuzzyEngine, FuzzyError};
use crate::kinematics::{
    derived_max_reach, DhRow, JointLimit, KinematicModel, KinematicsError, DOF,
};
use crate::metrics::MetricThresholds;
use crate::monitor::MonitorConfig;
use crate::rl::{EnvConfig, TrainConfig};

/// Environment variable consulted for the config path when no explicit
/// flag is given.
pub const CONFIG_ENV_VAR: &str = "SINGULARGUARD_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("kinematics block: {0}")]
    Kinematics(#[from] KinematicsError),
    #[error("fuzzy rule base: {0}")]
    Fuzzy(#[from] FuzzyError),
}

/// Arm geometry overrides; both lists must have exactly six entries
/// when present. Omitted lists fall back to the default arm.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsBlock {
    pub dh: Option<Vec<DhRow>>,
    pub limits: Option<Vec<JointLimit>>,
}

/// Classifier wiring: an external rule-base file, or the embedded one.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzyBlock {
    pub rule_base: Option<PathBuf>,
}

/// Training environment and optimization settings.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlBlock {
    pub env: EnvConfig,
    pub train: TrainConfig,
}

/// Top-level configuration for the command-line application.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub kinematics: KinematicsBlock,
    pub thresholds: MetricThresholds,
    pub fuzzy: FuzzyBlock,
    pub rl: RlBlock,
    pub monitor: MonitorConfig,
    /// Directory for artifacts (curves, parameters, scan CSVs).
    pub output_dir: PathBuf,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            kinematics: KinematicsBlock::default(),
            thresholds: MetricThresholds::default(),
            fuzzy: FuzzyBlock::default(),
            rl: RlBlock::default(),
            monitor: MonitorConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl AppConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse, and validate a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    /// Re-run every block's own validation; called on load.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolved_model()?;
        self.thresholds.validate().map_err(ConfigError::Invalid)?;
        self.monitor.validate().map_err(ConfigError::Invalid)?;
        self.rl.env.validate().map_err(ConfigError::Invalid)?;
        self.rl.train.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Build the arm model this config describes. Geometry overrides are
    /// checked for length and limit ordering; the reach bound is always
    /// derived from the table, never trusted from the file.
    pub fn resolved_model(&self) -> Result<KinematicModel, ConfigError> {
        let default = KinematicModel::ur10();
        let dh: [DhRow; DOF] = match &self.kinematics.dh {
            None => *default.dh(),
            Some(rows) => rows.clone().try_into().map_err(|_| {
                ConfigError::Invalid(format!(
                    "kinematics.dh needs exactly {DOF} rows, got {}",
                    rows.len()
                ))
            })?,
        };
        let limits: [JointLimit; DOF] = match &self.kinematics.limits {
            None => *default.joint_limits(),
            Some(ls) => ls.clone().try_into().map_err(|_| {
                ConfigError::Invalid(format!(
                    "kinematics.limits needs exactly {DOF} entries, got {}",
                    ls.len()
                ))
            })?,
        };
        Ok(KinematicModel::new(dh, limits, derived_max_reach(&dh))?)
    }

    /// Load the classifier: the file named by `fuzzy.rule_base`, or the
    /// embedded default base when none is named. Paths are interpreted
    /// relative to the working directory.
    pub fn fuzzy_engine(&self) -> Result<FuzzyEngine, ConfigError> {
        match &self.fuzzy.rule_base {
            None => Ok(FuzzyEngine::load_default()),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                Ok(FuzzyEngine::from_toml_str(&text)?)
            }
        }
    }
}
