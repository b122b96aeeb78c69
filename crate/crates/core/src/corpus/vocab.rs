//! Token ↔ id mapping with a fixed block of reserved ids.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const BREAK: u32 = 4;
pub const EMPTY: u32 = 5;
pub const DOCBOUND: u32 = 6;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
/// Separator between concatenated sentences.
pub const BREAK_TOKEN: &str = "_BREAK_";
/// Stand-in for a context sentence that filtering pruned completely.
pub const EMPTY_TOKEN: &str = "_EMPTY_";
/// Stand-in for a context sentence beyond the start of the document.
pub const DOCBOUND_TOKEN: &str = "_DOCBOUND_";

pub const RESERVED: [&str; 7] = [
    PAD_TOKEN,
    UNK_TOKEN,
    BOS_TOKEN,
    EOS_TOKEN,
    BREAK_TOKEN,
    EMPTY_TOKEN,
    DOCBOUND_TOKEN,
];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the reserved block.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Build from token sequences; tokens are added in order of descending
    /// frequency, ties lexicographic, so the result is deterministic.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut v = Self::new();
        for (t, _) in entries {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Map ids back to tokens, stopping at EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One non-reserved token per line; the line number (0-based) plus the
    /// size of the reserved block is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str, source: &str) -> Result<Self> {
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim_end_matches('\r');
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::parse(source, i + 1, format!("invalid vocabulary entry `{t}`")));
            }
            if v.ids.contains_key(t) {
                return Err(Error::parse(source, i + 1, format!("duplicate vocabulary entry `{t}`")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(BREAK_TOKEN), BREAK);
        assert_eq!(v.id(EMPTY_TOKEN), EMPTY);
        assert_eq!(v.id(DOCBOUND_TOKEN), DOCBOUND);
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn build_is_frequency_ordered() {
        let a = ["b", "a", "b"];
        let b = ["c", "a", "b"];
        let v = Vocabulary::build([&a[..], &b[..]]);
        assert_eq!(v.id("b"), 7);
        assert_eq!(v.id("a"), 8);
        assert_eq!(v.id("c"), 9);
    }

    #[test]
    fn file_roundtrip() {
        let words = ["x", "y", "_BREAK_", "z"];
        let v = Vocabulary::build([&words[..]]);
        let back = Vocabulary::from_file_string(&v.to_file_string(), "v").unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_file_string("a\na\n", "v").is_err());
    }
}
