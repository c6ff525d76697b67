//! Flat `key=value` run-configuration files.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines ignored; whitespace around key and value trimmed; the last
//! occurrence of a key wins. Keys use the long CLI flag names without the
//! leading dashes (e.g. `ratio=0.75`, `strategy=sbam`). Values parse lazily,
//! so a file may carry keys for several subcommands.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed config file contents; an empty default when no file was given.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}: line {}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!(
                    "{}: line {}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig {
            values,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// A typed value from the file, or `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}: key {key}: cannot parse {raw:?}",
                    self.path
                        .as_deref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "<config>".into())
                ))
            }),
        }
    }

    /// Flag value if given, else file value, else `default`.
    pub fn resolve<T: FromStr + Display>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Flag value if given, else file value; error naming the flag otherwise.
    pub fn resolve_required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => self.get(key)?.ok_or_else(|| {
                Error::Config(format!(
                    "missing required flag --{key} (no config value either)"
                ))
            }),
        }
    }
}
