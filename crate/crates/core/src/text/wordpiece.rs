//! WordPiece-style subword vocabulary learner and greedy longest-match
//! segmentation.
//!
//! Training starts from single characters (word-initial `c` and continuation
//! `##c`) and repeatedly merges the most frequent adjacent pair, ties broken
//! by the merged string, until the requested number of pieces is reached or
//! every word is a single piece. Segmentation then ignores the merge history
//! and takes the longest vocabulary prefix at each position.

use std::collections::{BTreeMap, BTreeSet};

use super::vocab::{frequency_order, word_counts};
use super::TokenId;

pub const CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_SUBWORD_SIZE: usize = 512;

fn merged(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION_PREFIX).unwrap_or(b))
}

/// Learns up to `n_pieces` pieces (the character alphabet is always kept in
/// full). Returned in usage-frequency order over the training words.
pub fn learn_wordpiece<S: AsRef<str>>(corpus: &[S], min_count: usize, n_pieces: usize) -> Vec<String> {
    let counts: Vec<(String, usize)> = word_counts(corpus)
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .map(|(w, c)| {
            let symbols = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION_PREFIX}{ch}")
                    }
                })
                .collect();
            (symbols, *c)
        })
        .collect();
    let mut pieces: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

    while pieces.len() < n_pieces {
        let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (symbols, c) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].clone(), w[1].clone())).or_insert(0) += c;
            }
        }
        let Some(((a, b), _)) = pairs.into_iter().max_by(|x, y| {
            x.1.cmp(&y.1)
                .then_with(|| merged(&y.0 .0, &y.0 .1).cmp(&merged(&x.0 .0, &x.0 .1)))
        }) else {
            break;
        };
        let m = merged(&a, &b);
        for (symbols, _) in &mut words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    out.push(m.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        pieces.insert(m);
    }

    let index: BTreeMap<&str, usize> = pieces.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut usage: BTreeMap<String, usize> = pieces.iter().map(|p| (p.clone(), 0)).collect();
    let ordered: Vec<&String> = pieces.iter().collect();
    for (w, c) in &counts {
        if let Some(ids) = segment_word(w, |p| index.get(p).copied()) {
            for id in ids {
                *usage.get_mut(ordered[id].as_str()).expect("piece exists") += c;
            }
        }
    }
    frequency_order(usage)
}

/// Greedy longest-prefix segmentation of one word. `None` when some position
/// has no matching piece (the caller maps the whole word to `<unk>`).
pub(crate) fn segment_word(word: &str, lookup: impl Fn(&str) -> Option<TokenId>) -> Option<Vec<TokenId>> {
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = lookup(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        let (id, end) = found?;
        out.push(id);
        start = end;
    }
    Some(out)
}
