//! Plain-text `key = value` files used for configs and run metadata.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
}

/// Ordered key/value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut file = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(KvError::Malformed { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(KvError::Malformed { line: i + 1 });
            }
            if file.get(key).is_some() {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            file.entries.push((key.to_string(), value.to_string()));
        }
        Ok(file)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses the value of `key` if present.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Errors on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let kv = KvFile::parse("# comment\nseed = 7\n\n size=64 \n").unwrap();
        assert_eq!(kv.get("seed"), Some("7"));
        assert_eq!(kv.parsed::<usize>("size").unwrap(), Some(64));
        assert_eq!(kv.parsed::<usize>("missing").unwrap(), None);
        assert_eq!(kv.to_string(), "seed = 7\nsize = 64\n");
        assert_eq!(KvFile::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn errors() {
        assert_eq!(KvFile::parse("a = 1\nnope").unwrap_err(), KvError::Malformed { line: 2 });
        assert!(matches!(KvFile::parse("a=1\na=2"), Err(KvError::Duplicate { line: 2, .. })));
        let kv = KvFile::parse("seed = x").unwrap();
        assert!(kv.parsed::<u64>("seed").is_err());
        assert_eq!(kv.check_keys(&["size"]).unwrap_err(), KvError::UnknownKey("seed".into()));
    }

    #[test]
    fn set_replaces_in_place() {
        let mut kv = KvFile::new();
        kv.set("a", 1);
        kv.set("b", 2);
        kv.set("a", 3);
        assert_eq!(kv.to_string(), "a = 3\nb = 2\n");
    }
}
