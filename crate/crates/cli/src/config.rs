//! Flat `key = value` configuration with section prefixes (`train.lr`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Config {
    pending: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut pending = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", k + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::config(format!("line {}: empty key", k + 1)));
            }
            if pending.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::config(format!("line {}: duplicate key `{key}`", k + 1)));
            }
        }
        Ok(Self {
            pending,
            resolved: BTreeMap::new(),
        })
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Self {
            pending: map,
            resolved: BTreeMap::new(),
        }
    }

    /// Command-line flags win over file values.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.pending.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        let v = self.pending.remove(key).unwrap_or_else(|| default.to_string());
        self.resolved.insert(key.to_string(), v.clone());
        v
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.pending.remove(key) {
            Some(v) => {
                let parsed = v
                    .parse()
                    .map_err(|e| CliError::config(format!("`{key}`: cannot parse `{v}`: {e}")))?;
                self.resolved.insert(key.to_string(), v);
                Ok(parsed)
            }
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// A key with no default; absent keys are not recorded.
    pub fn get_opt(&mut self, key: &str) -> Option<String> {
        let v = self.pending.remove(key)?;
        self.resolved.insert(key.to_string(), v.clone());
        Some(v)
    }

    pub fn require(&mut self, key: &str) -> Result<String, CliError> {
        self.get_opt(key)
            .ok_or_else(|| CliError::config(format!("missing required key `{key}`")))
    }

    /// Fails on keys no command asked for.
    pub fn finish(&self) -> Result<(), CliError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.pending.keys().map(String::as_str).collect();
        Err(CliError::config(format!("unknown keys: {}", keys.join(", "))))
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = Config::parse("# note\ntrain.lr = 0.01\n\nnoise.tau=0.04\n").unwrap();
        c.set("noise.tau", 0.5);
        assert_eq!(c.get("train.lr", 1.0).unwrap(), 0.01);
        assert_eq!(c.get("noise.tau", 1.0).unwrap(), 0.5);
        assert_eq!(c.get("train.epochs", 3usize).unwrap(), 3);
        c.finish().unwrap();
        assert_eq!(c.resolved()["train.epochs"], "3");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("a = 1\na = 2").is_err());
        assert!(Config::parse("novalue").is_err());
        let mut c = Config::parse("x = abc\ny = 1").unwrap();
        assert!(c.get("x", 1.0).is_err());
        assert!(c.finish().is_err());
    }
}
