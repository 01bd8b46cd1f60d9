//! Application configuration loaded from a TOML file. Every field has
//! a default so a minimal config (or none at all) still works with the
//! mock backend and an on-disk store under `./outagekit-store`.

use std::path::{Path, PathBuf};

use chrono::Duration;
use outagekit::backends::{BackendDescriptor, GenerationParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Unparsable {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing file: {0}")]
    MissingFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Directory holding the line-delimited store files.
    pub store_dir: PathBuf,
    /// TOML file with `[[rules]]` entries; optional.
    pub rule_file: Option<PathBuf>,
    /// Trained similarity model; written by `link --train`.
    pub model_file: Option<PathBuf>,
    /// Half-width of the active-incident window around declaration.
    pub scope_window_secs: i64,
    /// Minimum component-graph edge weight for a history link.
    pub min_weight: u64,
    /// Period of the service's background assessment task.
    pub assessment_period_secs: u64,
    /// Context budget in characters before whole-incident truncation.
    pub max_chars: usize,
    /// Default number of generation candidates.
    pub n_candidates: usize,
    /// Unit for time-to-summary reporting (86400 = days).
    pub report_unit_secs: i64,
    /// Address for `serve`.
    pub listen_addr: String,
    pub backend: BackendDescriptor,
    pub generation: GenerationParams,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            store_dir: PathBuf::from("outagekit-store"),
            rule_file: None,
            model_file: None,
            scope_window_secs: 86_400,
            min_weight: 3,
            assessment_period_secs: 300,
            max_chars: 12_000,
            n_candidates: 5,
            report_unit_secs: 86_400,
            listen_addr: "127.0.0.1:8797".into(),
            backend: BackendDescriptor::mock(),
            generation: GenerationParams::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_owned(),
            source,
        })?;
        let config: AppConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Unparsable {
                path: path.to_owned(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scope_window_secs <= 0 {
            return Err(ConfigError::Invalid("scope_window_secs must be > 0".into()));
        }
        if self.assessment_period_secs == 0 {
            return Err(ConfigError::Invalid(
                "assessment_period_secs must be > 0".into(),
            ));
        }
        if self.report_unit_secs <= 0 {
            return Err(ConfigError::Invalid("report_unit_secs must be > 0".into()));
        }
        if self.n_candidates == 0 {
            return Err(ConfigError::Invalid("n_candidates must be >= 1".into()));
        }
        if self.max_chars == 0 {
            return Err(ConfigError::Invalid("max_chars must be > 0".into()));
        }
        self.backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(rule_file) = &self.rule_file {
            if !rule_file.exists() {
                return Err(ConfigError::MissingFile(format!(
                    "rule_file {} does not exist",
                    rule_file.display()
                )));
            }
        }
        Ok(())
    }

    pub fn scope_window(&self) -> Duration {
        Duration::seconds(self.scope_window_secs)
    }

    pub fn report_unit(&self) -> Duration {
        Duration::seconds(self.report_unit_secs)
    }

    /// The model file, required to exist. Commands that consume a model
    /// call this; `link --train` writes the path without the check.
    pub fn require_model_file(&self) -> Result<&Path, ConfigError> {
        let path = self
            .model_file
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("model_file is not configured".into()))?;
        if !path.exists() {
            return Err(ConfigError::MissingFile(format!(
                "model_file {} does not exist (run `link --train` first)",
                path.display()
            )));
        }
        Ok(path)
    }
}
