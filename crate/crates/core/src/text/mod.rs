//! Caption normalisation, word and WordPiece-style tokenisation, vocabularies
//! and the stopword inventory used by the decoding constraints.

mod stopwords;
mod vocab;
mod wordpiece;

pub use stopwords::StopwordSet;
pub use vocab::{build_vocab, Vocabulary, VocabKind, SPECIAL_TOKENS};
pub use wordpiece::{learn_wordpiece, CONTINUATION_PREFIX, DEFAULT_SUBWORD_SIZE};

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercases, deletes every punctuation character (apostrophes included, no
/// space inserted), collapses whitespace runs and trims.
pub fn normalize(caption: &str) -> String {
    let stripped: String = caption
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !is_punctuation(*c))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token ids for one caption. A framed sequence starts with `BOS` and ends
/// with `EOS`; padding never appears inside a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.contains(&PAD) {
            return Err(Error::Contract("token sequence contains padding".into()));
        }
        Ok(Self(ids))
    }

    /// Wraps `body` as `[BOS, body.., EOS]`.
    pub fn framed(body: &[TokenId]) -> Result<Self> {
        if body.iter().any(|&t| t == BOS || t == EOS) {
            return Err(Error::Contract("bos/eos inside a caption body".into()));
        }
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_framed(&self) -> bool {
        self.0.len() >= 2
            && self.0[0] == BOS
            && self.0[self.0.len() - 1] == EOS
            && self.0[1..self.0.len() - 1]
                .iter()
                .all(|&t| t != BOS && t != EOS)
    }

    /// Tokens between the frame markers (or after `BOS` for an open prefix).
    pub fn body(&self) -> &[TokenId] {
        let start = usize::from(self.0.first() == Some(&BOS));
        let end = if self.0.len() > start && self.0.last() == Some(&EOS) {
            self.0.len() - 1
        } else {
            self.0.len()
        };
        &self.0[start..end]
    }

    /// Teacher-forcing split: decoder inputs `ids[..n-1]`, targets `ids[1..]`.
    pub fn teacher_forcing(&self) -> Result<(&[TokenId], &[TokenId])> {
        if !self.is_framed() {
            return Err(Error::Contract(
                "teacher forcing needs a bos/eos framed sequence".into(),
            ));
        }
        Ok((&self.0[..self.0.len() - 1], &self.0[1..]))
    }
}
