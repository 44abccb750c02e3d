//! Flat `key = value` run configuration.
//!
//! A run starts from the defaults of its subcommand, then applies an optional config
//! file, then command-line flags. Keys outside the subcommand's set are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    entries: Vec<(&'static str, String)>,
}

impl RunConfig {
    pub fn new(defaults: &[(&'static str, &str)]) -> Self {
        Self { entries: defaults.iter().map(|(k, v)| (*k, v.to_string())).collect() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => {
                entry.1 = value.into();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key '{key}' is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
    }

    /// `None` for an empty value.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        match self.raw(key) {
            "" => Err(Error::Config(format!("'{key}' is required"))),
            v => Ok(v),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("invalid list item '{s}' for '{key}'"))))
            .collect()
    }

    /// One `key = value` line per entry, in declaration order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::new(&[("seed", "0"), ("lr", "0.001"), ("out", ""), ("dims", "64,128")])
    }

    #[test]
    fn file_then_flag_precedence() {
        let mut c = cfg();
        c.apply_text("# comment\nseed = 5\n\nlr=0.5 # trailing\n").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 9);
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.5);
        assert_eq!(c.get_opt::<String>("out").unwrap(), None);
        assert_eq!(c.get_list::<usize>("dims").unwrap(), vec![64, 128]);
        assert_eq!(c.render(), "seed = 9\nlr = 0.5\nout = \ndims = 64,128\n");
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let mut c = cfg();
        assert!(matches!(c.apply_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("seed 1"), Err(Error::Config(_))));
        c.set("seed", "abc").unwrap();
        assert!(matches!(c.get::<u64>("seed"), Err(Error::Config(_))));
        assert!(matches!(c.require("out"), Err(Error::Config(_))));
    }
}
