//! UTF-8 `key=value` line format shared by configs, checkpoints and reports.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// Parsed `key=value` lines. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key=value, got {line:?}", no + 1);
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!(Config, "line {}: duplicate key {key:?}", no + 1);
            }
        }
        Ok(KvMap { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.require(key),
        }
    }

    pub fn require_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        parse_list(raw).map_err(|_| Error::Config(format!("bad list {raw:?} for {key:?}")))
    }

    /// Fails on any key outside `known`, so typos do not pass silently.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        if let Some(k) = self.keys().find(|k| !known.contains(k)) {
            bail!(Config, "unknown key {k:?}");
        }
        Ok(())
    }

    /// Sorted `key=value\n` lines.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_list(raw: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    raw.split(',').map(|s| s.trim().parse()).collect()
}

pub fn join_list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
