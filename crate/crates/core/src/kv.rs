//! Flat `key = value` text files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys
//! are unique. Readers mark the keys they consume so that leftovers can be
//! reported as unknown.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = KvFile::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if out.get_raw(k).is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key {k:?}",
                    i + 1
                )));
            }
            out.entries.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    /// Appends every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvFile) {
        for (k, v) in &other.entries {
            self.set(format!("{prefix}.{k}"), v);
        }
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            file: self,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvFile {
        let p = format!("{prefix}.");
        KvFile {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Entries outside every `prefix.` section in `sections`.
    pub fn top_level(&self, sections: &[&str]) -> KvFile {
        KvFile {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| {
                    !sections
                        .iter()
                        .any(|s| k.strip_prefix(s).is_some_and(|r| r.starts_with('.')))
                })
                .cloned()
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

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

/// Typed access to a [`KvFile`] that remembers which keys were read.
pub struct KvReader<'a> {
    file: &'a KvFile,
    used: RefCell<BTreeSet<String>>,
}

impl KvReader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.file.get_raw(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.file.get_raw(key).is_some()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("missing key {key:?}")))
    }

    /// Whitespace-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|e| Error::config(format!("{key}: cannot parse {t:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn array<T: FromStr, const K: usize>(&self, key: &str) -> Result<Option<[T; K]>>
    where
        T::Err: Display,
    {
        match self.list::<T>(key)? {
            None => Ok(None),
            Some(v) => {
                let n = v.len();
                v.try_into()
                    .map(Some)
                    .map_err(|_| Error::config(format!("{key}: expected {K} values, got {n}")))
            }
        }
    }

    /// Fails if any key was never read.
    pub fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        let unknown: Vec<&str> = self.file.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Space-separated rendering of a list.
pub fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let f =
            KvFile::parse("# header\na = 1\n\nb= 2 3 4 # trailing\nname = hello world\n").unwrap();
        let r = f.reader();
        assert_eq!(r.require::<u32>("a").unwrap(), 1);
        assert_eq!(r.array::<f64, 3>("b").unwrap(), Some([2.0, 3.0, 4.0]));
        assert_eq!(r.require::<String>("name").unwrap(), "hello world");
        assert_eq!(r.get_or("missing", 5u8).unwrap(), 5);
        r.finish().unwrap();
    }

    #[test]
    fn errors() {
        assert!(KvFile::parse("novalue\n").is_err());
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
        assert!(KvFile::parse(" = 2\n").is_err());
        let f = KvFile::parse("a = x\nb = 1 2\nc = 3\n").unwrap();
        let r = f.reader();
        assert!(r.require::<f64>("a").is_err());
        assert!(r.array::<f64, 3>("b").is_err());
        assert!(r.require::<u8>("zzz").is_err());
        assert!(r.finish().unwrap_err().to_string().contains("c"));
    }

    #[test]
    fn text_round_trip_and_sections() {
        let mut f = KvFile::new();
        f.set("x.a", 1.5);
        f.set("x.b", "two words");
        f.set("y", 3);
        f.set("y", 4);
        let back = KvFile::parse(&f.to_text()).unwrap();
        assert_eq!(back, f);
        let s = f.section("x");
        assert_eq!(s.get_raw("a"), Some("1.5"));
        assert_eq!(s.entries().len(), 2);
        let mut g = KvFile::new();
        g.extend_prefixed("p", &s);
        assert_eq!(g.get_raw("p.b"), Some("two words"));
        assert_eq!(join(&[1, 2, 3]), "1 2 3");
        let top = f.top_level(&["x"]);
        assert_eq!(top.keys().collect::<Vec<_>>(), vec!["y"]);
    }
}
