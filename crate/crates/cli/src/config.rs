use std::fs;
use std::path::Path;

use lvqa_core::data::DataConfig;
use lvqa_core::model::ModelConfig;
use lvqa_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Everything a workflow step can be configured with. Missing sections and
/// fields take library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Optional file, then `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    /// Applies `section.field=value` overrides. Values parse as JSON when
    /// they can and are taken as bare strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> CliResult<Self> {
        let mut tree = serde_json::to_value(self).map_err(lvqa_core::Error::from)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{item}` is not KEY=VALUE")))?;
            let key = key.trim();
            let slot = key
                .split_once('.')
                .and_then(|(section, field)| tree.get_mut(section)?.get_mut(field))
                .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}` (see --help)")))?;
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
    }
}

/// Every overridable key with its default, as `section.field = value`.
pub fn config_keys() -> Vec<(String, String)> {
    let tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut out = Vec::new();
    if let Value::Object(sections) = tree {
        for (section, fields) in sections {
            if let Value::Object(fields) = fields {
                for (field, value) in fields {
                    out.push((format!("{section}.{field}"), value.to_string()));
                }
            }
        }
    }
    out
}

pub fn config_keys_help() -> String {
    let mut s = String::from("Config keys for --set KEY=VALUE (defaults shown):\n");
    for (k, v) in config_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}
