//! Plain-text `key = value` configuration files.
//!
//! Keys name fields of a serializable settings struct; nested fields use
//! dots (`noise.accel_sigma`). Values are parsed as JSON when possible and
//! taken as strings otherwise, so `styles = linear, loop` and
//! `styles = ["linear", "loop"]` are equivalent.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

pub fn parse(text: &str, path: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                path: path.to_string(),
                line: i + 1,
            });
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_value(raw: &str, current: &Value) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if current.is_array() {
        return Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
                .collect(),
        );
    }
    Value::String(raw.to_string())
}

/// Overrides fields of `defaults` with `pairs`.
pub fn apply<T: Serialize + DeserializeOwned>(defaults: &T, pairs: &[(String, String)]) -> Result<T, ConfigError> {
    let mut root = serde_json::to_value(defaults).expect("settings serialize");
    for (key, raw) in pairs {
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        }
        *slot = parse_value(raw, slot);
    }
    serde_json::from_value(root).map_err(|e| ConfigError::BadValue {
        key: pairs.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(", "),
        reason: e.to_string(),
    })
}

/// Loads `path` over the defaults, or returns the defaults when no file is given.
pub fn load<T: Serialize + DeserializeOwned + Clone>(defaults: &T, path: Option<&Path>) -> Result<T, ConfigError> {
    let Some(path) = path else {
        return Ok(defaults.clone());
    };
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    apply(defaults, &parse(&text, &shown)?)
}
