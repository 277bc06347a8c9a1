//! `key=value` run configuration: defaults, then an optional config file,
//! then command-line overrides. The resolved set is echoed as `run.config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use gmcnet::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Starts from `defaults`; these also define the accepted keys.
    pub fn new(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        self.merge_text(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!(
                "unknown config key {key:?} (known: {})",
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Applies a flag value when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {s:?}")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.config"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_order_and_unknown_keys() {
        let mut c = RunConfig::new(&[("epochs", "200"), ("lr", "0.001")]);
        c.merge_text("# comment\nepochs = 5\n").unwrap();
        c.flag("lr", Some(0.01)).unwrap();
        c.flag::<f64>("epochs", None).unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), 5);
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.01);
        assert!(c.merge_text("bogus=1").is_err());
        assert_eq!(c.to_text(), "epochs=5\nlr=0.01\n");
    }
}
