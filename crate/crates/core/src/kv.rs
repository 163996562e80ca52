//! Flat `key = value` text files, one entry per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(KvMap { entries, consumed: Default::default() })
    }

    pub fn get<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.entries.get(key) else { return Ok(None) };
        self.consumed.insert(key.to_string());
        raw.parse::<T>().map(Some).map_err(|e| Error::Config(vec![format!("{key} = {raw}: {e}")]))
    }

    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Keys never read through [`KvMap::get`].
    pub fn unconsumed(&self) -> Vec<&str> {
        self.entries.keys().filter(|k| !self.consumed.contains(*k)).map(String::as_str).collect()
    }

    pub fn finish(&self) -> Result<()> {
        let left = self.unconsumed();
        if left.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(left.iter().map(|k| format!("unknown key {k}")).collect()))
        }
    }
}

/// Renders `(key, value)` pairs in the order given.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
