//! Training configuration resolution: command-line flags override a
//! key=value file, which overrides built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Holds the parsed key=value file and records every resolved setting
/// so the effective configuration can be echoed back to the user.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    /// Parses `path` if given. Lines are `key = value`; blank lines and
    /// `#` comments are skipped. Duplicate keys are rejected.
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Validation(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let key = key.trim().to_string();
                let value = value.trim().to_string();
                if file.insert(key.clone(), value).is_some() {
                    return Err(CliError::Validation(format!(
                        "{}:{}: duplicate key {key:?}",
                        path.display(),
                        lineno + 1
                    )));
                }
            }
        }
        Ok(Resolver {
            file,
            resolved: Vec::new(),
        })
    }

    /// True if the file supplied this key (and nothing consumed it yet).
    pub fn has(&self, key: &str) -> bool {
        self.file.contains_key(key)
    }

    /// Resolves one setting: flag if present, else file entry, else
    /// `default`. The choice is recorded for later echoing.
    pub fn take<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.file.remove(key);
        let value = if let Some(v) = flag {
            v
        } else if let Some(text) = from_file {
            text.parse().map_err(|e| {
                CliError::Validation(format!("config key {key:?}: bad value {text:?}: {e}"))
            })?
        } else {
            default
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Errors if the file contained keys nothing consumed.
    pub fn finish(self) -> Result<Vec<(String, String)>, CliError> {
        if !self.file.is_empty() {
            let keys: Vec<&str> = self.file.keys().map(String::as_str).collect();
            return Err(CliError::Validation(format!(
                "unknown configuration keys: {}",
                keys.join(", ")
            )));
        }
        Ok(self.resolved)
    }
}
