//! Rule-based fluency error detection over normalised captions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::StopwordSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluencyFlag {
    IncompleteSentence,
    RepeatedEvent,
    RepeatedAdverb,
    MissingConjunction,
    MissingVerb,
}

impl fmt::Display for FluencyFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FluencyFlag::IncompleteSentence => "incomplete_sentence",
            FluencyFlag::RepeatedEvent => "repeated_event",
            FluencyFlag::RepeatedAdverb => "repeated_adverb",
            FluencyFlag::MissingConjunction => "missing_conjunction",
            FluencyFlag::MissingVerb => "missing_verb",
        })
    }
}

/// Two uses of the same adverb at most this many words apart are flagged.
pub const ADVERB_WINDOW: usize = 3;
pub const MIN_WORDS: usize = 3;

const AUXILIARIES: [&str; 4] = ["is", "are", "was", "were"];

/// Word lists the rules consult.
#[derive(Clone, Debug, PartialEq)]
pub struct FluencyLexicon {
    pub verbs: BTreeSet<String>,
    pub adverbs: BTreeSet<String>,
    pub conjunctions: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    pub articles: BTreeSet<String>,
    pub stopwords: StopwordSet,
}

fn word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl Default for FluencyLexicon {
    fn default() -> Self {
        Self {
            verbs: word_list(include_str!("../../data/fluency/verbs.txt")),
            adverbs: word_list(include_str!("../../data/fluency/adverbs.txt")),
            conjunctions: word_list(include_str!("../../data/fluency/conjunctions.txt")),
            prepositions: word_list(include_str!("../../data/fluency/prepositions.txt")),
            articles: word_list(include_str!("../../data/fluency/articles.txt")),
            stopwords: StopwordSet::english(),
        }
    }
}

impl FluencyLexicon {
    /// Reads `verbs.txt`, `adverbs.txt`, `conjunctions.txt`,
    /// `prepositions.txt` and `articles.txt` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<BTreeSet<String>> {
            let set = word_list(&std::fs::read_to_string(dir.join(name))?);
            if set.is_empty() {
                return Err(Error::format(format!("{name} is empty")));
            }
            Ok(set)
        };
        Ok(Self {
            verbs: read("verbs.txt")?,
            adverbs: read("adverbs.txt")?,
            conjunctions: read("conjunctions.txt")?,
            prepositions: read("prepositions.txt")?,
            articles: read("articles.txt")?,
            stopwords: StopwordSet::english(),
        })
    }

    fn is_finite_verb(&self, w: &str) -> bool {
        self.verbs.contains(w)
            && (AUXILIARIES.contains(&w)
                || (w.ends_with('s') && !w.ends_with("ss"))
                || w.ends_with("ed"))
    }

    /// Flags for one normalised caption, sorted and deduplicated.
    pub fn check(&self, caption: &str) -> Vec<FluencyFlag> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let mut flags = BTreeSet::new();

        let dangling = words.last().is_some_and(|w| {
            self.conjunctions.contains(*w) || self.prepositions.contains(*w) || self.articles.contains(*w)
        });
        if words.len() < MIN_WORDS || dangling {
            flags.insert(FluencyFlag::IncompleteSentence);
        }

        let mut bigrams: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for w in words.windows(2) {
            if !self.stopwords.contains(w[0]) && !self.stopwords.contains(w[1]) {
                *bigrams.entry((w[0], w[1])).or_default() += 1;
            }
        }
        if bigrams.values().any(|&c| c >= 2) {
            flags.insert(FluencyFlag::RepeatedEvent);
        }

        let repeated_adverb = words.iter().enumerate().any(|(i, w)| {
            self.adverbs.contains(*w)
                && words[i + 1..].iter().take(ADVERB_WINDOW).any(|v| v == w)
        });
        if repeated_adverb {
            flags.insert(FluencyFlag::RepeatedAdverb);
        }

        if !words.iter().any(|w| self.verbs.contains(*w)) {
            flags.insert(FluencyFlag::MissingVerb);
        }

        // a verb group is a maximal run of lexicon verbs containing a finite
        // form; consecutive groups need a connective somewhere between them
        let mut joined = true;
        let mut in_group = false;
        let mut seen_group = false;
        for w in &words {
            if self.verbs.contains(*w) {
                if !in_group && self.is_finite_verb(w) {
                    if seen_group && !joined {
                        flags.insert(FluencyFlag::MissingConjunction);
                    }
                    seen_group = true;
                    joined = false;
                    in_group = true;
                }
            } else {
                in_group = false;
                if self.conjunctions.contains(*w) {
                    joined = true;
                }
            }
        }

        flags.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(s: &str) -> Vec<FluencyFlag> {
        FluencyLexicon::default().check(s)
    }

    #[test]
    fn spec_examples() {
        assert_eq!(flags("a dog barks and"), vec![FluencyFlag::IncompleteSentence]);
        assert!(flags("a man speaks a man speaks").contains(&FluencyFlag::RepeatedEvent));
        assert!(flags("a dog barks").is_empty());
    }

    #[test]
    fn each_rule_fires_alone() {
        assert_eq!(flags("dog barks"), vec![FluencyFlag::IncompleteSentence]);
        assert_eq!(flags("a dog barks on the"), vec![FluencyFlag::IncompleteSentence]);
        assert_eq!(flags("a dog barks loudly loudly"), vec![FluencyFlag::RepeatedAdverb]);
        assert_eq!(flags("a loud dog nearby"), vec![FluencyFlag::MissingVerb]);
        assert_eq!(flags("a dog barks a man speaks"), vec![FluencyFlag::MissingConjunction]);
    }

    #[test]
    fn connectives_and_verb_runs_are_fluent() {
        for s in [
            "a dog barks while a man speaks",
            "a dog barks and a man speaks then a door slams",
            "birds are chirping in the distance",
            "a man speaks followed by a dog barking",
            "water drips into a sink as a man whistles",
        ] {
            assert!(flags(s).is_empty(), "{s}: {:?}", flags(s));
        }
    }

    #[test]
    fn adverbs_far_apart_are_fine() {
        assert!(!flags("a dog barks loudly and then a man speaks and a bell rings loudly")
            .contains(&FluencyFlag::RepeatedAdverb));
    }

    #[test]
    fn shipped_lists_nonempty() {
        let l = FluencyLexicon::default();
        assert!(l.verbs.len() > 500);
        assert!(l.articles.contains("the"));
        assert!(l.conjunctions.contains("and"));
    }
}
