use std::collections::BTreeSet;
use std::path::Path;

use super::{TokenId, Vocabulary};
use crate::error::{Error, Result};

const ENGLISH: &str = include_str!("../../data/stopwords_en.txt");

/// Surface tokens that may be generated more than once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopwordSet {
    words: BTreeSet<String>,
}

impl StopwordSet {
    /// The bundled English inventory (179 entries).
    pub fn english() -> Self {
        Self::parse(ENGLISH).expect("bundled stopword list is valid")
    }

    /// One token per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = BTreeSet::new();
        for line in text.lines() {
            let w = line.trim();
            if w.is_empty() || w.starts_with('#') {
                continue;
            }
            if w.chars().any(char::is_uppercase) {
                return Err(Error::format(format!("stopword {w:?} is not lowercase")));
            }
            words.insert(w.to_string());
        }
        if words.is_empty() {
            return Err(Error::format("empty stopword list"));
        }
        Ok(Self { words })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Ids of the vocabulary entries that are stopwords.
    pub fn ids_in(&self, vocab: &Vocabulary) -> BTreeSet<TokenId> {
        self.words.iter().filter_map(|w| vocab.id(w)).collect()
    }
}
