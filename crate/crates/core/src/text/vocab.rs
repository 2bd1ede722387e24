use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::wordpiece::{learn_wordpiece, segment_word, CONTINUATION_PREFIX, DEFAULT_SUBWORD_SIZE};
use super::{TokenId, TokenSequence, EOS, UNK};
use crate::error::{Error, Result};

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const HEADER_TAG: &str = "#sercap-vocab";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Word,
    Subword,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Word => "word",
            VocabKind::Subword => "subword",
        })
    }
}

impl FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(VocabKind::Word),
            "subword" => Ok(VocabKind::Subword),
            other => Err(Error::config(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

/// Bijective token ↔ id map with the four reserved specials at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Word counts over normalised captions, split on whitespace.
pub(crate) fn word_counts<S: AsRef<str>>(corpus: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for caption in corpus {
        for w in caption.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sorts by count descending, then lexicographically.
pub(crate) fn frequency_order(counts: impl IntoIterator<Item = (String, usize)>) -> Vec<String> {
    let mut items: Vec<(String, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(t, _)| t).collect()
}

/// Builds a vocabulary from normalised captions. Subword vocabularies use the
/// default target size; see [`Vocabulary::subword`] to pick another.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    kind: VocabKind,
    min_count: usize,
) -> Result<Vocabulary> {
    match kind {
        VocabKind::Word => Vocabulary::word(corpus, min_count),
        VocabKind::Subword => Vocabulary::subword(corpus, min_count, DEFAULT_SUBWORD_SIZE),
    }
}

impl Vocabulary {
    pub fn from_tokens(kind: VocabKind, body: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(body);
        if tokens.len() < 5 {
            return Err(Error::format("vocabulary needs at least one regular token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { kind, tokens, index })
    }

    pub fn word<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let counts = word_counts(corpus)
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()));
        Self::from_tokens(VocabKind::Word, frequency_order(counts))
    }

    pub fn subword<S: AsRef<str>>(corpus: &[S], min_count: usize, target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let pieces = learn_wordpiece(corpus, min_count, target_size.saturating_sub(SPECIAL_TOKENS.len()));
        Self::from_tokens(VocabKind::Subword, pieces)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Whitespace split; unknown words map to `<unk>`. Output is framed.
    pub fn word_tokenize(&self, text: &str) -> TokenSequence {
        let body: Vec<TokenId> = text
            .split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        TokenSequence::framed(&body).expect("word ids never collide with frame markers")
    }

    /// Joins regular tokens with single spaces; frame markers and padding are dropped.
    pub fn word_detokenize(&self, seq: &TokenSequence) -> String {
        self.surface_tokens(seq).collect::<Vec<_>>().join(" ")
    }

    /// Greedy longest-match segmentation of each word; framed.
    pub fn subword_tokenize(&self, text: &str) -> TokenSequence {
        let mut body = Vec::new();
        for w in text.split_whitespace() {
            match segment_word(w, |piece| self.id(piece)) {
                Some(ids) => body.extend(ids),
                None => body.push(UNK),
            }
        }
        TokenSequence::framed(&body).expect("piece ids never collide with frame markers")
    }

    /// Concatenates continuation pieces onto the preceding piece.
    pub fn subword_detokenize(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for tok in self.surface_tokens(seq) {
            if let Some(rest) = tok.strip_prefix(CONTINUATION_PREFIX) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    fn surface_tokens<'a>(&'a self, seq: &'a TokenSequence) -> impl Iterator<Item = &'a str> + 'a {
        seq.ids()
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(move |&&t| t == UNK || !self.is_special(t))
            .map(move |&t| self.token(t).unwrap_or(SPECIAL_TOKENS[UNK]))
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        match self.kind {
            VocabKind::Word => self.word_tokenize(text),
            VocabKind::Subword => self.subword_tokenize(text),
        }
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        match self.kind {
            VocabKind::Word => self.word_detokenize(seq),
            VocabKind::Subword => self.subword_detokenize(seq),
        }
    }

    /// Header line with kind and specials, then one token per line (line
    /// index = id).
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "{HEADER_TAG} kind={} specials={}\n",
            self.kind,
            SPECIAL_TOKENS.join(",")
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty vocabulary file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::format("missing vocabulary header"));
        }
        let mut kind = None;
        let mut specials = None;
        for f in fields {
            match f.split_once('=') {
                Some(("kind", v)) => kind = Some(v.parse::<VocabKind>()?),
                Some(("specials", v)) => specials = Some(v.to_string()),
                _ => return Err(Error::format(format!("bad vocabulary header field {f:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::format("vocabulary header lacks kind"))?;
        if specials.as_deref() != Some(SPECIAL_TOKENS.join(",").as_str()) {
            return Err(Error::format("vocabulary specials do not match <pad>,<bos>,<eos>,<unk>"));
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(Error::format("vocabulary must list the specials first"));
        }
        Self::from_tokens(kind, tokens[4..].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
