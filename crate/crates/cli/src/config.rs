//! Layered configuration (preset, then `--config` file, then flags) and the
//! per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use covalign::seed::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Sections of a `--config` JSON file. Each is merged over the command's
/// defaults, so a file only needs the fields it changes.
#[derive(Debug, Default)]
pub struct FileConfig {
    sections: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(sections)) => Ok(FileConfig { sections }),
            Ok(_) => Err(CliError::Invalid(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => Err(CliError::Invalid(format!("{}: {e}", path.display()))),
        }
    }

    /// `base` with the named section merged over it.
    pub fn layer<T: Serialize + DeserializeOwned>(&self, section: &str, base: T) -> Result<T, CliError> {
        let Some(overlay) = self.sections.get(section) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base).map_err(|e| CliError::Other(e.to_string()))?;
        merge(&mut value, overlay);
        serde_json::from_value(value).map_err(|e| CliError::Invalid(format!("config section {section:?}: {e}")))
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Written next to every command's outputs. The timestamp lives only here.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub tool_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub created_utc: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Other(e.to_string()))?;
        Ok(RunManifest {
            command: command.to_string(),
            config_hash: config_hash(&config),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("run_manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// SHA-256 of the compact JSON form; object keys serialize sorted.
pub fn config_hash(config: &Value) -> String {
    sha256_hex(config.to_string().as_bytes())
}
