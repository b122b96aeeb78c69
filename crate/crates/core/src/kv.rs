//! Flat `key=value` text records used for config files and checkpoint headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed as
//! they are read so that leftover (unknown) keys can be reported.

use std::fmt::Display;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    source: String,
    entries: IndexMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(source, i + 1, format!("expected key=value, got `{line}`")));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::parse(source, i + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(KvFile {
            source: source.to_string(),
            entries,
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Remove and parse `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::parse(&self.source, line, format!("bad value for `{key}`: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Remove every key starting with `prefix`, returning `(suffix, value)` pairs.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let (v, _) = self.entries.shift_remove(&k).unwrap();
                (k[prefix.len()..].to_string(), v)
            })
            .collect()
    }

    /// Fail if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::parse(self.source, line, format!("unknown key `{k}`")));
        }
        Ok(())
    }
}

/// Append `key=value\n` to `out`.
pub fn put(out: &mut String, key: &str, value: impl Display) {
    out.push_str(key);
    out.push('=');
    out.push_str(&value.to_string());
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_unknown_keys() {
        let mut kv = KvFile::parse("# c\na = 1\n\nb=x y\n", "t").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert!(kv.contains("b"));
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("t:4"), "{err}");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvFile::parse("novalue\n", "t").is_err());
        assert!(KvFile::parse("a=1\na=2\n", "t").is_err());
    }

    #[test]
    fn bad_value_names_line() {
        let mut kv = KvFile::parse("\nn=abc\n", "cfg").unwrap();
        let err = kv.take::<usize>("n").unwrap_err();
        assert!(err.to_string().starts_with("cfg:2"), "{err}");
    }
}
