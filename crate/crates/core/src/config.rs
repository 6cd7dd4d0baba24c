//! Plain-text `key = value` files grouped under `[section]` headers.
//!
//! `#` starts a comment line. Keys before the first header belong to the
//! unnamed section `""`. Readers track which keys were consumed so callers
//! can reject anything unrecognized.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CoreError::Config(format!("line {}: unterminated section header", n + 1)))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(CoreError::Config(format!("line {}: empty key", n + 1)));
            }
            let prev = sections.entry(current.clone()).or_default().insert(key.to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(CoreError::Config(format!("line {}: duplicate key {current}.{key}", n + 1)));
            }
        }
        Ok(Self { sections })
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    /// Reader over one section. A missing section reads as empty.
    pub fn section(&self, name: &str) -> SectionReader<'_> {
        static EMPTY: BTreeMap<String, String> = BTreeMap::new();
        SectionReader { name: name.to_string(), map: self.sections.get(name).unwrap_or(&EMPTY), used: BTreeSet::new() }
    }

    /// Fail if the document has sections outside `known`.
    pub fn check_sections(&self, known: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !known.contains(&name.as_str()) {
                return Err(CoreError::Config(format!("unknown section [{name}]")));
            }
        }
        Ok(())
    }
}

pub struct SectionReader<'a> {
    name: String,
    map: &'a BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl<'a> SectionReader<'a> {
    pub fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.used.insert(key.to_string());
        let map: &'a BTreeMap<String, String> = self.map;
        map.get(key).map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let name = self.name.clone();
                v.parse::<T>().map_err(|_| CoreError::Config(format!("[{name}] {key}: cannot parse {v:?}")))
            }
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let name = self.name.clone();
        let v = self.raw(key).ok_or_else(|| CoreError::Config(format!("[{name}] missing key {key}")))?;
        v.parse::<T>().map_err(|_| CoreError::Config(format!("[{name}] {key}: cannot parse {v:?}")))
    }

    /// Fail on any key that was never asked for.
    pub fn finish(self) -> Result<()> {
        for k in self.map.keys() {
            if !self.used.contains(k) {
                return Err(CoreError::Config(format!("unknown key {k:?} in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

/// Builds a document in insertion order.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            self.out.push_str("# ");
            self.out.push_str(line);
            self.out.push('\n');
        }
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("[{name}]\n"));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let doc = KvDoc::parse("top = 1\n# note\n[geometry]\nsid_mm = 1000\n  sdd_mm=1200 \n").unwrap();
        let mut g = doc.section("geometry");
        assert_eq!(g.require::<f64>("sid_mm").unwrap(), 1000.0);
        g.finish().unwrap_err();
        let mut g = doc.section("geometry");
        let _ = g.get_or("sid_mm", 0.0).unwrap();
        let _ = g.get_or("sdd_mm", 0.0).unwrap();
        assert_eq!(g.get_or("missing", 7usize).unwrap(), 7);
        g.finish().unwrap();
        assert!(doc.check_sections(&["", "geometry"]).is_ok());
        assert!(doc.check_sections(&["geometry"]).is_err());
    }

    #[test]
    fn malformed_lines() {
        assert!(KvDoc::parse("[open\n").is_err());
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        let doc = KvDoc::parse("[s]\nx = abc\n").unwrap();
        assert!(doc.section("s").require::<f64>("x").is_err());
    }

    #[test]
    fn writer_output_reparses() {
        let mut w = KvWriter::new();
        w.comment("header").section("a").kv("x", 1.5).kv("y", "text");
        let doc = KvDoc::parse(&w.finish()).unwrap();
        assert_eq!(doc.section("a").require::<String>("y").unwrap(), "text");
    }
}
