//! Line-based `key = value` text used by every config file and the
//! checkpoint header. `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("line {}: expected `key = value`, got {raw:?}", n + 1));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return config_err(format!("line {}: empty key", n + 1));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return config_err(format!("line {}: duplicate key {key:?}", n + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed value, or `default` when absent.
    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))),
        }
    }

    pub fn list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => parse_list(s).map_err(|_| Error::Config(format!("{key}: cannot parse list {s:?}"))),
        }
    }

    /// Keys not in `known`, so typos surface as errors.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        let bad: Vec<&str> = self.entries.keys().map(String::as_str).filter(|k| !known.contains(k)).collect();
        if bad.is_empty() {
            Ok(())
        } else {
            config_err(format!("unknown keys: {}", bad.join(", ")))
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest text that parses back to the same f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_lists() {
        let kv = KvMap::parse("# header\nscale = 2\n depths = [6, 6,6] # trailing\n\nname=x").unwrap();
        assert_eq!(kv.get_or("scale", 0usize).unwrap(), 2);
        assert_eq!(kv.list_or("depths", &[]).unwrap(), vec![6, 6, 6]);
        assert_eq!(kv.get_or("missing", 1.5f64).unwrap(), 1.5);
        assert!(kv.reject_unknown(&["scale", "depths"]).is_err());
    }

    #[test]
    fn bad_lines() {
        assert!(KvMap::parse("novalue").is_err());
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        assert!(KvMap::parse("a = x").unwrap().get_or("a", 0usize).is_err());
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 2.0 / 255.0, 1e-300, -0.0, 123456.789] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
