//! Flat `key = value` configuration files. Blank lines and lines starting
//! with `#` are ignored; keys are the long flag names. Flags win over the file.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::Failure;

pub const KNOWN_KEYS: &[&str] = &[
    "mode",
    "tw",
    "ss",
    "tx",
    "ty",
    "k",
    "d",
    "hidden",
    "train-embeddings",
    "vocab-size",
    "epochs",
    "batch-size",
    "lr",
    "clip",
    "seed",
    "beam",
    "eval-every",
    "corpus",
    "dev",
    "embeddings",
    "stats",
    "checkpoint",
    "out",
    "log",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    entries: HashMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, Failure> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Failure::Usage(format!("{}:{}: {msg}", path.display(), i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found `{line}`")))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if entries.insert(key.to_string(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(ConfigFile {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// The flag value if given, else the parsed file value.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        if flag.is_some() {
            return Ok(flag);
        }
        match self.entries.get(key) {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|e| {
                Failure::Usage(format!("{}:{line}: invalid value for `{key}`: {e}", self.path.display()))
            }),
        }
    }

    /// Like [`ConfigFile::resolve`]; relative file paths are taken relative to
    /// the config file's directory.
    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        if flag.is_some() {
            return flag;
        }
        let (value, _) = self.entries.get(key)?;
        let p = PathBuf::from(value);
        Some(match self.path.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        })
    }
}
