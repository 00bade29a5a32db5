//! Flat key-value run configuration.
//!
//! A config file is plain text: one `key = value` per line, `#` comments,
//! nothing nested. Command-line flags override file values; the fully
//! resolved settings are hashed (together with the prompt-template texts)
//! into a canonical SHA-256 that is stamped into every artifact the command
//! writes, so identical inputs are recognizable as identical runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line} is not `key = value`: {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config key {key}: cannot parse {value:?} as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
}

/// Parsed key-value file (keys are unique; later lines win).
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; absent keys yield `Ok(None)`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                ty: std::any::type_name::<T>(),
            }),
        }
    }
}

/// Flag beats file beats default.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag beats file; may stay unset.
pub fn resolve_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Seed precedence: flag, then config file, then `ACOMM_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    flag.or(file)
        .or_else(|| {
            std::env::var("ACOMM_SEED")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

/// Canonical hash of the resolved settings: sorted `key=value` lines plus
/// a digest line per prompt template.
pub fn config_hash(command: &str, settings: &BTreeMap<String, String>) -> String {
    let mut canonical = String::new();
    let _ = writeln!(canonical, "command={command}");
    for (k, v) in settings {
        let _ = writeln!(canonical, "{k}={v}");
    }
    for (name, text) in acomm_core::protocols::templates::all() {
        let _ = writeln!(canonical, "template.{name}={}", sha256_hex(text.as_bytes()));
    }
    sha256_hex(canonical.as_bytes())
}
