//! Config-file overlay: `key = value` lines with `#` comments. Every
//! key must be consumed by the command that loaded the file; leftovers
//! are errors so typos never pass silently.

use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub struct FileConfig {
    values: IndexMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig { values: IndexMap::new() });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = IndexMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: no + 1,
                msg: "expected 'key = value'".into(),
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(FileConfig { values })
    }

    /// Removes and parses one key via `FromStr`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.values.shift_remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key '{key}' has invalid value '{raw}'"))
            }),
        }
    }

    /// Removes and parses one key with a custom parser (for enums whose
    /// errors should name the valid choices).
    pub fn take_with<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T>,
    ) -> Result<Option<T>> {
        match self.values.shift_remove(key) {
            None => Ok(None),
            Some(raw) => parse(&raw).map(Some),
        }
    }

    /// Errors on any key no flag consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        Ok(())
    }
}
