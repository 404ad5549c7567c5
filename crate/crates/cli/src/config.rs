//! Flat JSON config files. Keys mirror the long flag names (either `-` or
//! `_` separated); a flag given on the command line wins over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{io_at, CliError, Result};

pub fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::invalid(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::invalid(format!("{}: {e}", path.display()))),
    }
}

/// Fills every unset field of `args` from `config`. Unknown keys are an
/// error so that typos do not silently fall back to defaults.
pub fn merge<T: Serialize + DeserializeOwned>(args: T, config: &Map<String, Value>, command: &str) -> Result<T> {
    let mut value = serde_json::to_value(&args)?;
    let fields = value.as_object_mut().expect("argument structs serialize to objects");
    for (key, v) in config {
        let name = key.replace('-', "_");
        let Some(slot) = fields.get_mut(&name) else {
            return Err(CliError::invalid(format!("unknown config key {key:?} for `{command}`")));
        };
        if slot.is_null() || *slot == Value::Bool(false) {
            *slot = v.clone();
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::invalid(format!("config for `{command}`: {e}")))
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| CliError::invalid(format!("missing --{flag} (flag or config key {:?})", flag.replace('-', "_"))))
}
