//! Flat `key = value` text files.
//!
//! Used for spectrum parameter sets, map headers, run configs, manifests and
//! metric summaries. Blank lines and lines starting with `#` are ignored;
//! keys keep their file order.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse {value:?} as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered key-value document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = KvDoc::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if doc.get(k).is_some() {
                return Err(KvError::Duplicate(k.to_string()));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), KvError> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, KvError> {
        self.parsed(key, "a number")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, KvError> {
        Ok(self.f64(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, KvError> {
        Ok(self.parsed(key, "a non-negative integer")?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, KvError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "a boolean (on/off)",
                }),
            },
        }
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, KvError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "a comma-separated list of numbers",
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, KvError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| KvError::Value {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvDoc {
        KvDoc {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

impl std::fmt::Display for KvDoc {
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
    fn parses_comments_and_order() {
        let doc = KvDoc::parse("# header\n\nb = 2\na=  x y \n").unwrap();
        assert_eq!(doc.keys().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(doc.get("a"), Some("x y"));
        assert_eq!(doc.f64("b").unwrap(), Some(2.0));
    }

    #[test]
    fn rejects_bad_lines_and_duplicates() {
        assert!(matches!(
            KvDoc::parse("novalue"),
            Err(KvError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            KvDoc::parse("a = 1\na = 2"),
            Err(KvError::Duplicate(_))
        ));
    }

    #[test]
    fn sections_and_lists() {
        let doc = KvDoc::parse("esc.k = -5e-5\nesc.dip = neg\nsweep.scan_time = 1, 2,3").unwrap();
        let esc = doc.section("esc.");
        assert_eq!(esc.get("dip"), Some("neg"));
        assert_eq!(
            doc.f64_list("sweep.scan_time").unwrap().unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(doc.bool_or("ff.enabled", true).unwrap());
    }
}
