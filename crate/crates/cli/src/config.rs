//! Flat `key = value` configuration with command-line overrides.
//!
//! Every lookup records the effective value, defaults included, so the
//! resolved set can be written next to the run's outputs and fed back with
//! `--config` to repeat it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct Config {
    given: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn parse_lines(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{origin}:{}: expected `key = value`, got `{raw}`", i + 1);
        };
        let key = k.trim();
        if key.is_empty() {
            bail!("{origin}:{}: empty key", i + 1);
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Self {
            given: parse_lines(text, "config")?,
            resolved: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self {
            given: parse_lines(&text, &path.display().to_string())?,
            resolved: BTreeMap::new(),
        })
    }

    /// Later values win.
    pub fn set(&mut self, key: &str, value: &str) {
        self.given.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.given.contains_key(key)
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match self.given.get(key) {
            Some(raw) => self.parse(key, raw)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.given.get(key) {
            Some(raw) => {
                let v: T = self.parse(key, raw)?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?
            .with_context(|| format!("missing required config key `{key}`"))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + Display>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: Display,
        T: Clone,
    {
        let values = match self.given.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|s| self.parse(key, s.trim()))
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        let text: Vec<String> = values.iter().map(T::to_string).collect();
        self.resolved.insert(key.to_string(), text.join(","));
        Ok(values)
    }

    /// Records a derived setting that has no key of its own in the input.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Fails on any given key that no lookup consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .given
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config key(s): {}", unknown.join(", "));
        }
        Ok(())
    }

    pub fn resolved_text(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_defaults_and_unknown_keys() {
        let mut c = Config::from_text("# comment\nlr = 0.5\nsteps=3 # trailing\n").unwrap();
        c.set("steps", "7");
        assert_eq!(c.get("lr", 1.0).unwrap(), 0.5);
        assert_eq!(c.get("steps", 1usize).unwrap(), 7);
        assert_eq!(c.get("batch_size", 16usize).unwrap(), 16);
        assert_eq!(c.list("hidden", &[4usize, 4]).unwrap(), vec![4, 4]);
        assert!(c.finish().is_ok());
        assert_eq!(
            c.resolved_text(),
            "batch_size = 16\nhidden = 4,4\nlr = 0.5\nsteps = 7\n"
        );
        c.set("bogus", "1");
        assert!(c.finish().unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn parse_errors_name_the_key() {
        let mut c = Config::from_text("steps = many\n").unwrap();
        let err = c.get("steps", 1usize).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
        assert!(Config::from_text("novalue\n").is_err());
    }
}
