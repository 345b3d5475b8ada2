//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value, found {raw:?}", no + 1);
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                bail!("line {}: empty key", no + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Flag value if given, else the file value, else the default.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key {key}: cannot parse {raw:?}: {e}")),
            None => Ok(default),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let c = ConfigFile::parse("# run\nepochs = 30\nlearning-rate=0.25 # trailing\n\n").unwrap();
        assert_eq!(c.resolve("epochs", None, 5usize).unwrap(), 30);
        assert_eq!(c.resolve("epochs", Some(7usize), 5).unwrap(), 7);
        assert_eq!(c.resolve("learning_rate", None, 1.0f64).unwrap(), 0.25);
        assert_eq!(c.resolve("seed", None, 3u64).unwrap(), 3);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(ConfigFile::parse("epochs 30").is_err());
        assert!(ConfigFile::parse(" = 3").is_err());
        let c = ConfigFile::parse("epochs = many").unwrap();
        assert!(c.resolve("epochs", None, 1usize).is_err());
    }
}
