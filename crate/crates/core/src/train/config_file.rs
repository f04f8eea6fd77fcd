//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; keys mirror the field names of the training and model configs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}"))),
        }
    }

    /// Removes a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}"))),
        }
    }

    /// Fails on any key that no consumer took.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                Err(Error::Config(format!("line {line}: unknown key `{key}`")))
            }
        }
    }
}

impl FromStr for ConfigFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_lists() {
        let mut c: ConfigFile =
            "# run\nlr_init = 0.001\nencoder_grids = 8, 4,2\n\nseed=3 # trailing"
                .parse()
                .unwrap();
        assert_eq!(c.take::<f64>("lr_init").unwrap(), Some(0.001));
        assert_eq!(
            c.take_list::<usize>("encoder_grids").unwrap(),
            Some(vec![8, 4, 2])
        );
        assert_eq!(c.take::<u64>("missing").unwrap(), None);
        assert_eq!(c.take::<u64>("seed").unwrap(), Some(3));
        c.finish().unwrap();
    }

    #[test]
    fn reports_line_numbers() {
        assert!("a = 1\na = 2"
            .parse::<ConfigFile>()
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        let mut c: ConfigFile = "\nseed = x".parse().unwrap();
        assert!(c
            .take::<u64>("seed")
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        let c: ConfigFile = "bogus = 1".parse().unwrap();
        assert!(c.finish().unwrap_err().to_string().contains("bogus"));
    }
}
