//! Subword vocabulary: a dense bidirectional subword <-> id map.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateEntry(String),
    #[error("empty vocabulary entry at line {0}")]
    EmptyEntry(usize),
    #[error("character {0:?} appears in the corpus but not as a vocabulary entry")]
    MissingCharClosure(char),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// An ordered subword vocabulary with dense ids `0..len` and the maximum
/// entry length in characters. Immutable after construction and safe to
/// share across workers.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

impl Vocabulary {
    pub fn from_entries<I, S>(entries: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vocabulary {
            entries: Vec::new(),
            index: HashMap::new(),
            max_len: 1,
        };
        for (line, entry) in entries.into_iter().enumerate() {
            let entry = entry.into();
            if entry.is_empty() {
                return Err(VocabError::EmptyEntry(line + 1));
            }
            if out.index.contains_key(&entry) {
                return Err(VocabError::DuplicateEntry(entry));
            }
            out.index.insert(entry.clone(), out.entries.len() as u32);
            out.max_len = out.max_len.max(entry.chars().count());
            out.entries.push(entry);
        }
        Ok(out)
    }

    /// Reads one entry per line; an optional `subword<TAB>id` suffix is
    /// tolerated (the id must match the line order).
    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        Self::from_entries(text.lines().map(|line| {
            line.split('\t').next().unwrap_or("").to_string()
        }))
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut f = fs::File::create(path)?;
        for entry in &self.entries {
            writeln!(f, "{entry}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maximum entry length in characters (`m` in the lattice recurrences).
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, subword: &str) -> Option<u32> {
        self.index.get(subword).copied()
    }

    pub fn lookup(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn contains(&self, subword: &str) -> bool {
        self.index.contains_key(subword)
    }

    /// Id of a span of characters, without building an intermediate string
    /// when the span is longer than `max_len`.
    pub fn id_of_chars(&self, span: &[char]) -> Option<u32> {
        if span.is_empty() || span.len() > self.max_len {
            return None;
        }
        let s: String = span.iter().collect();
        self.id(&s)
    }

    /// Checks that every character in `text` is itself an entry.
    pub fn check_char_closure(&self, text: &str) -> Result<(), VocabError> {
        let mut buf = [0u8; 4];
        for ch in text.chars() {
            if !ch.is_whitespace() && !self.contains(ch.encode_utf8(&mut buf)) {
                return Err(VocabError::MissingCharClosure(ch));
            }
        }
        Ok(())
    }
}

/// Reads a vocabulary from `path`, per the one-entry-per-line format.
pub fn load_vocab(path: &Path) -> Result<Vocabulary, VocabError> {
    Vocabulary::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_vocab_shape() {
        let v = Vocabulary::from_entries(["c", "a", "t", "at", "ca"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.max_len(), 2);
        assert_eq!(v.id("at"), Some(3));
        assert_eq!(v.lookup(3), "at");
    }

    #[test]
    fn singleton() {
        let v = Vocabulary::from_entries(["x"]).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.max_len(), 1);
    }

    #[test]
    fn duplicate_rejected() {
        let err = Vocabulary::from_entries(["a", "a"]).unwrap_err();
        assert!(matches!(err, VocabError::DuplicateEntry(_)));
    }

    #[test]
    fn empty_entry_rejected() {
        let err = Vocabulary::from_entries(["a", ""]).unwrap_err();
        assert!(matches!(err, VocabError::EmptyEntry(2)));
    }

    #[test]
    fn ids_are_dense_and_bijective() {
        let v = Vocabulary::from_entries(["c", "a", "t", "at", "ca"]).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.lookup(id)), Some(id));
        }
    }

    #[test]
    fn load_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vocab");
        let v = Vocabulary::from_entries(["c", "a", "t", "at", "ca"]).unwrap();
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        assert_eq!(v.entries(), v2.entries());
        let path2 = dir.path().join("v2.vocab");
        v2.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn char_closure_check() {
        let v = Vocabulary::from_entries(["c", "a"]).unwrap();
        assert!(v.check_char_closure("ca ca").is_ok());
        assert!(matches!(
            v.check_char_closure("cat"),
            Err(VocabError::MissingCharClosure('t'))
        ));
    }
}
