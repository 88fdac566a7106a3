//! Line-based `key = value` configuration files.
//!
//! One flat namespace is shared by scenario, training, and experiment keys;
//! `#` starts a comment and blank lines are skipped. Typed getters live here,
//! the domain structs interpret the keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed key/value file (or override set built in memory).
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    /// Insert or override a key (CLI flags land here).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    /// Merge `other` over `self` (later wins).
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, |s| s.parse::<f64>().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, |s| s.parse::<usize>().ok())
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, |s| s.parse::<u64>().ok())
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.parse_with(key, |s| match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    /// Comma-separated list of f64 values.
    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.parse_with(key, |s| {
            s.split(',').map(|t| t.trim().parse::<f64>().ok()).collect::<Option<Vec<_>>>()
        })
    }

    /// Comma-separated list of strings.
    pub fn get_list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key)
            .map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => f(raw).map(Some).ok_or_else(|| {
                Error::Config(format!("key `{key}`: cannot parse value `{raw}`"))
            }),
        }
    }

    /// Serialize back to `key = value` lines (used when embedding a config in
    /// checkpoints).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_values() {
        let text = "# scenario\nn_bs = 8\n\nwavelength_m = 0.03 # meters\nmethods = omp, ols\n";
        let cfg = KvConfig::from_str_content(text).unwrap();
        assert_eq!(cfg.get_usize("n_bs").unwrap(), Some(8));
        assert_eq!(cfg.get_f64("wavelength_m").unwrap(), Some(0.03));
        assert_eq!(cfg.get_list("methods").unwrap(), vec!["omp", "ols"]);
        assert!(cfg.get("missing").is_none());
    }

    #[test]
    fn rejects_malformed_lines_and_bad_numbers() {
        assert!(KvConfig::from_str_content("just words\n").is_err());
        let cfg = KvConfig::from_str_content("n = abc\n").unwrap();
        assert!(cfg.get_usize("n").is_err());
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = KvConfig::new();
        cfg.set("b", "2");
        cfg.set("a", "1");
        let again = KvConfig::from_str_content(&cfg.to_text()).unwrap();
        assert_eq!(again.get("a"), Some("1"));
        assert_eq!(again.get("b"), Some("2"));
    }
}
