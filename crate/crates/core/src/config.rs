//! Flat key=value config files.
//!
//! Every pipeline stage reads the same format: one `key = value` pair per
//! line, `#` comments, later assignments win. CLI flags are merged on top as
//! `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line_no}: expected key=value, got {line:?}")]
    MalformedLine { line_no: usize, line: String },
    #[error("missing required key {key:?}")]
    MissingKey { key: String },
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        ConfigMap::default()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut map = ConfigMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::MalformedLine {
                line_no: idx + 1,
                line: raw.to_string(),
            })?;
            map.set(key.trim(), value.trim());
        }
        Ok(map)
    }

    /// Parse `key=value` override strings, e.g. from repeated CLI flags.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (idx, raw) in overrides.iter().enumerate() {
            let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::MalformedLine {
                line_no: idx + 1,
                line: raw.clone(),
            })?;
            self.set(key.trim(), value.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.get_str(key).ok_or_else(|| ConfigError::MissingKey {
            key: key.to_string(),
        })
    }

    fn parse_as<T: FromStr>(&self, key: &str, wanted: &'static str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(value) => value.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.clone(),
                wanted,
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.parse_as(key, "u64")?.unwrap_or(default))
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.parse_as(key, "usize")?.unwrap_or(default))
    }

    pub fn get_i64(&self, key: &str, default: i64) -> Result<i64, ConfigError> {
        Ok(self.parse_as(key, "i64")?.unwrap_or(default))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.parse_as(key, "f64")?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: other.to_string(),
                wanted: "bool",
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Serialize as sorted `key=value` lines, the same shape `from_file` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
