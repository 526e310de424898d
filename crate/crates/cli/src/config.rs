//! Config files and flag merging. A config file holds the same keys as the
//! command's flags; flags given on the command line win.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

/// Reads the command section of a config file. Accepts a plain object of
/// flags, a run record `{"command", "config"}` or any output embedding one
/// under `"run"`.
pub fn load(path: &Path, command: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
    let run = v.get("run").unwrap_or(&v);
    if let Some(cmd) = run.get("command").and_then(Value::as_str) {
        if cmd != command {
            return Err(CliError::Usage(format!("config {} is for '{cmd}', not '{command}'", path.display())));
        }
        return run.get("config").cloned().ok_or_else(|| CliError::Usage("run record without 'config'".into()));
    }
    if !v.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    Ok(v)
}

/// Overlays the flags that were given onto the config values.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<Value>) -> Result<T, CliError> {
    let mut base = match config {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(CliError::Usage("config must be a JSON object".into())),
        None => Map::new(),
    };
    if let Value::Object(given) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        for (k, v) in given {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// The record embedded in every output.
pub fn run_record<T: Serialize>(command: &str, resolved: &T) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": resolved,
    })
}

/// `out.csv` -> `out.csv.run.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Core(e.into()))
}
