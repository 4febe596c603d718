use std::collections::BTreeMap;
use std::fmt;

/// Multiply-add tally keyed by the region path active when an op ran
/// (`"stage1/lca/scores"`, `"decoder/fuse"`, ...).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    macs: BTreeMap<String, u64>,
    kv_tokens: BTreeMap<String, usize>,
}

impl OpCounter {
    pub fn add(&mut self, label: &str, macs: u64) {
        *self.macs.entry(label.to_string()).or_default() += macs;
    }

    pub fn record_kv_tokens(&mut self, label: &str, tokens: usize) {
        self.kv_tokens.insert(label.to_string(), tokens);
    }

    pub fn get(&self, label: &str) -> u64 {
        self.macs.get(label).copied().unwrap_or(0)
    }

    /// Sum over every label equal to `prefix` or nested below it.
    pub fn total(&self, prefix: &str) -> u64 {
        self.macs
            .iter()
            .filter(|(k, _)| under(k, prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// Sum over labels under `prefix` whose final component is `leaf`.
    pub fn total_leaf(&self, prefix: &str, leaf: &str) -> u64 {
        self.macs
            .iter()
            .filter(|(k, _)| under(k, prefix) && k.rsplit('/').next() == Some(leaf))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn kv_tokens(&self, label: &str) -> Option<usize> {
        self.kv_tokens.get(label).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.macs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn kv_entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.kv_tokens.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn clear(&mut self) {
        self.macs.clear();
        self.kv_tokens.clear();
    }
}

fn under(label: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || label == prefix
        || (label.starts_with(prefix) && label.as_bytes().get(prefix.len()) == Some(&b'/'))
}

impl fmt::Display for OpCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.macs {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
