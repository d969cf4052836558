//! Run configuration: one JSON document with `model`, `train`, `drift` and
//! `data` sections. Unknown keys are rejected; absent keys take their
//! defaults, and each defaulted key is logged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drift::DriftConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Input files. Relative paths are resolved against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub features: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_ids: Option<PathBuf>,
    pub val_ids: Option<PathBuf>,
    pub test_ids: Option<PathBuf>,
}

impl DataConfig {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.features,
            &mut self.edges,
            &mut self.labels,
            &mut self.train_ids,
            &mut self.val_ids,
            &mut self.test_ids,
        ]
        .into_iter()
        .flatten()
        {
            *p = crate::io::resolve(base, p);
        }
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("data.{name} is required")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub drift: DriftConfig,
    pub data: DataConfig,
}

/// Logs every key of `defaults` that `given` leaves out.
fn log_defaults(section: &str, given: Option<&serde_json::Value>, defaults: serde_json::Value) {
    let serde_json::Value::Object(defaults) = defaults else {
        return;
    };
    for (key, value) in defaults {
        let present = given.and_then(|g| g.as_object()).is_some_and(|g| g.contains_key(&key));
        if !present {
            log::info!("config: {section}.{key} not set, using default {value}");
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if !raw.is_object() {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        }
        let config: RunConfig =
            serde_json::from_value(raw.clone()).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        let defaults = RunConfig::default();
        log_defaults("model", raw.get("model"), serde_json::to_value(&defaults.model)?);
        log_defaults("train", raw.get("train"), serde_json::to_value(&defaults.train)?);
        log_defaults("drift", raw.get("drift"), serde_json::to_value(defaults.drift)?);
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Reads and validates `path`, resolving data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_json(&std::fs::read_to_string(path).map_err(crate::io::at(path))?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.data.resolve_against(base);
        Ok(config)
    }
}
