//! Caption evaluation: CIDEr-D, SPIDEr from external SPICE scores, the
//! sentence-embedding cosine, rule-based fluency errors, FENSE and vocabulary size.

mod cider;
mod fluency;

pub use cider::{cider_d_tokens, MAX_N, SIGMA};
pub use fluency::{FluencyFlag, FluencyLexicon, ADVERB_WINDOW, MIN_WORDS};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::{SentenceEmbedding, SentenceEncoder};
use crate::text::normalize;

/// One candidate with its references, both normalised on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalItem {
    pub fn new(candidate: &str, references: &[impl AsRef<str>]) -> Result<Self> {
        let candidate = normalize(candidate);
        if candidate.is_empty() {
            return Err(Error::Contract("candidate is empty after normalisation".into()));
        }
        if references.is_empty() {
            return Err(Error::Contract("item has no references".into()));
        }
        Ok(Self {
            candidate,
            references: references.iter().map(|r| normalize(r.as_ref())).collect(),
        })
    }
}

/// The metrics' own tokeniser: normalise, then split on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

pub fn cider_d(items: &[EvalItem]) -> Result<(f64, Vec<f64>)> {
    let toks: Vec<_> = items
        .iter()
        .map(|it| {
            (
                metric_tokens(&it.candidate),
                it.references.iter().map(|r| metric_tokens(r)).collect(),
            )
        })
        .collect();
    cider_d_tokens(&toks)
}

pub fn spider(cider_d: f64, spice: f64) -> f64 {
    (cider_d + spice) / 2.0
}

/// One SPICE score per line, in item order.
pub fn read_spice_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::format(format!("spice line {}: {e}", i + 1)))
        })
        .collect()
}

/// Number of distinct words over all candidates.
pub fn unique_words<S: AsRef<str>>(candidates: &[S]) -> usize {
    candidates
        .iter()
        .flat_map(|c| metric_tokens(c.as_ref()))
        .collect::<BTreeSet<_>>()
        .len()
}

/// How per-reference cosines combine into one item score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SbertAggregation {
    #[default]
    Mean,
    Max,
}

impl fmt::Display for SbertAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SbertAggregation::Mean => "mean",
            SbertAggregation::Max => "max",
        })
    }
}

impl FromStr for SbertAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::config(format!("unknown sbert aggregation {other:?}"))),
        }
    }
}

/// Memoises sentence embeddings by normalised text.
pub struct EmbeddingCache<'e> {
    encoder: &'e SentenceEncoder,
    cache: HashMap<String, SentenceEmbedding>,
}

impl<'e> EmbeddingCache<'e> {
    pub fn new(encoder: &'e SentenceEncoder) -> Self {
        Self {
            encoder,
            cache: HashMap::new(),
        }
    }

    pub fn embed(&mut self, text: &str) -> Result<&SentenceEmbedding> {
        if !self.cache.contains_key(text) {
            let e = self.encoder.embed_text(text)?;
            self.cache.insert(text.to_string(), e);
        }
        Ok(&self.cache[text])
    }

    pub fn cosine(&mut self, a: &str, b: &str) -> Result<f64> {
        let ea = self.embed(a)?.clone();
        Ok(ea.cosine(self.embed(b)?))
    }
}

pub fn sbert_metric(
    items: &[EvalItem],
    cache: &mut EmbeddingCache,
    agg: SbertAggregation,
) -> Result<(f64, Vec<f64>)> {
    let mut per = Vec::with_capacity(items.len());
    for it in items {
        let mut sims = Vec::with_capacity(it.references.len());
        for r in &it.references {
            sims.push(cache.cosine(&it.candidate, r)?);
        }
        per.push(match agg {
            SbertAggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
            SbertAggregation::Max => sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok((mean(&per), per))
}

/// Per-item FENSE: the similarity, divided by ten when any fluency flag fired.
pub fn fense_item(sbert: f64, flagged: bool) -> f64 {
    if flagged {
        sbert / 10.0
    } else {
        sbert
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn six<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !x.is_finite() {
        return Err(serde::ser::Error::custom(format!("non-finite metric {x}")));
    }
    let v = if *x == 0.0 { 0.0 } else { *x };
    RawValue::from_string(format!("{v:.6}"))
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}

fn six_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => six(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub candidate: String,
    #[serde(serialize_with = "six")]
    pub cider_d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "six_opt")]
    pub spice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "six_opt")]
    pub spider: Option<f64>,
    #[serde(serialize_with = "six")]
    pub sbert: f64,
    #[serde(serialize_with = "six")]
    pub fense: f64,
    pub fluency_flags: Vec<FluencyFlag>,
}

/// Corpus-level numbers. `n_words` is fractional only when averaged over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    #[serde(serialize_with = "six")]
    pub cider_d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "six_opt")]
    pub spice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "six_opt")]
    pub spider: Option<f64>,
    #[serde(serialize_with = "six")]
    pub sbert: f64,
    #[serde(serialize_with = "six")]
    pub flu_err: f64,
    #[serde(serialize_with = "six")]
    pub fense: f64,
    #[serde(serialize_with = "six")]
    pub n_words: f64,
}

impl CorpusScores {
    /// Field-wise mean; an optional field survives only if present everywhere.
    pub fn mean_of(runs: &[CorpusScores]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Contract("mean over zero score sets".into()));
        }
        let m = |f: fn(&CorpusScores) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
        let mo = |f: fn(&CorpusScores) -> Option<f64>| {
            runs.iter().map(f).collect::<Option<Vec<_>>>().map(|v| mean(&v))
        };
        Ok(Self {
            cider_d: m(|r| r.cider_d),
            spice: mo(|r| r.spice),
            spider: mo(|r| r.spider),
            sbert: m(|r| r.sbert),
            flu_err: m(|r| r.flu_err),
            fense: m(|r| r.fense),
            n_words: m(|r| r.n_words),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_items: usize,
    pub sbert_aggregation: SbertAggregation,
    pub corpus: CorpusScores,
    pub items: Vec<ItemScores>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything the evaluator needs besides the items themselves.
pub struct Evaluator<'e> {
    pub cache: EmbeddingCache<'e>,
    pub lexicon: FluencyLexicon,
    pub aggregation: SbertAggregation,
}

impl<'e> Evaluator<'e> {
    pub fn new(encoder: &'e SentenceEncoder) -> Self {
        Self {
            cache: EmbeddingCache::new(encoder),
            lexicon: FluencyLexicon::default(),
            aggregation: SbertAggregation::Mean,
        }
    }

    pub fn fluency(&self, caption: &str) -> Vec<FluencyFlag> {
        self.lexicon.check(caption)
    }

    /// Scores `items`; `spice` supplies external per-item SPICE values.
    pub fn evaluate(&mut self, items: &[EvalItem], spice: Option<&[f64]>) -> Result<MetricReport> {
        if let Some(s) = spice {
            if s.len() != items.len() {
                return Err(Error::dim(format!(
                    "{} SPICE scores for {} items",
                    s.len(),
                    items.len()
                )));
            }
        }
        let (cider, cider_items) = cider_d(items)?;
        let (_, sbert_items) = sbert_metric(items, &mut self.cache, self.aggregation)?;
        let mut out = Vec::with_capacity(items.len());
        let mut flagged = 0usize;
        for (i, it) in items.iter().enumerate() {
            let flags = self.fluency(&it.candidate);
            if !flags.is_empty() {
                flagged += 1;
            }
            let sp = spice.map(|s| s[i]);
            out.push(ItemScores {
                candidate: it.candidate.clone(),
                cider_d: cider_items[i],
                spice: sp,
                spider: sp.map(|s| spider(cider_items[i], s)),
                sbert: sbert_items[i],
                fense: fense_item(sbert_items[i], !flags.is_empty()),
                fluency_flags: flags,
            });
        }
        let spice_mean = spice.map(mean);
        let n = items.len() as f64;
        let candidates: Vec<&str> = items.iter().map(|i| i.candidate.as_str()).collect();
        let corpus = CorpusScores {
            cider_d: cider,
            spice: spice_mean,
            spider: spice_mean.map(|s| spider(cider, s)),
            sbert: mean(&sbert_items),
            flu_err: flagged as f64 / n,
            fense: mean(&out.iter().map(|o| o.fense).collect::<Vec<_>>()),
            n_words: unique_words(&candidates) as f64,
        };
        Ok(MetricReport {
            n_items: items.len(),
            sbert_aggregation: self.aggregation,
            corpus,
            items: out,
        })
    }

    /// Human-agreement estimate: each of five references in turn plays the
    /// candidate against the other four. Items without exactly five
    /// references are skipped with a warning.
    pub fn cross_reference(&mut self, groups: &[Vec<String>]) -> Result<CrossReference> {
        let usable: Vec<&Vec<String>> = groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| {
                if g.len() == 5 {
                    Some(g)
                } else {
                    log::warn!("cross-reference: item {i} has {} references, skipped", g.len());
                    None
                }
            })
            .collect();
        if usable.is_empty() {
            return Err(Error::Contract("no item has exactly five references".into()));
        }
        let mut folds = Vec::with_capacity(5);
        for fold in 0..5 {
            let items = usable
                .iter()
                .map(|g| {
                    let others: Vec<&String> =
                        g.iter().enumerate().filter(|(j, _)| *j != fold).map(|(_, r)| r).collect();
                    EvalItem::new(&g[fold], &others)
                })
                .collect::<Result<Vec<_>>>()?;
            folds.push(self.evaluate(&items, None)?);
        }
        let mean = CorpusScores::mean_of(&folds.iter().map(|f| f.corpus.clone()).collect::<Vec<_>>())?;
        Ok(CrossReference {
            n_items: usable.len(),
            mean,
            folds,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossReference {
    pub n_items: usize,
    pub mean: CorpusScores,
    pub folds: Vec<MetricReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    fn encoder() -> SentenceEncoder {
        let corpus = [
            "a dog barks loudly",
            "a man speaks while rain falls",
            "a car passes by",
            "a bell rings twice",
        ];
        let vocab = Vocabulary::subword(&corpus, 1, 64).unwrap();
        SentenceEncoder::new(vocab, 16, 1, 4, 32).unwrap()
    }

    #[test]
    fn spider_arithmetic() {
        assert_eq!(spider(0.8, 0.2), 0.5);
        assert!((spider(0.769, 0.181) - 0.475).abs() < 1e-12);
    }

    #[test]
    fn unique_words_counts_union() {
        assert_eq!(unique_words(&["a dog", "a cat"]), 3);
        assert_eq!(unique_words(&["a dog", "a dog"]), 2);
    }

    #[test]
    fn sbert_self_similarity_is_one() {
        let enc = encoder();
        let mut cache = EmbeddingCache::new(&enc);
        let items = vec![EvalItem::new("a dog barks", &["a dog barks"]).unwrap()];
        let (s, _) = sbert_metric(&items, &mut cache, SbertAggregation::Mean).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_aggregation_dominates_mean() {
        let enc = encoder();
        let mut cache = EmbeddingCache::new(&enc);
        let items = vec![EvalItem::new("a dog barks", &["a car passes by", "a dog barks loudly"]).unwrap()];
        let (mean, _) = sbert_metric(&items, &mut cache, SbertAggregation::Mean).unwrap();
        let (max, _) = sbert_metric(&items, &mut cache, SbertAggregation::Max).unwrap();
        assert!(max >= mean);
    }

    #[test]
    fn fense_composition() {
        assert_eq!(fense_item(0.6, false), 0.6);
        assert!((fense_item(0.6, true) - 0.06).abs() < 1e-15);
        let enc = encoder();
        let mut ev = Evaluator::new(&enc);
        let items = vec![
            EvalItem::new("a dog barks", &["a dog barks loudly"]).unwrap(),
            EvalItem::new("a dog barks and", &["a man speaks"]).unwrap(),
        ];
        let r = ev.evaluate(&items, None).unwrap();
        assert_eq!(r.items[0].fense, r.items[0].sbert);
        assert_eq!(r.items[1].fense, r.items[1].sbert / 10.0);
        assert_eq!(r.corpus.flu_err, 0.5);
        assert!(r.corpus.spider.is_none());
    }

    #[test]
    fn spice_file_feeds_spider() {
        let enc = encoder();
        let mut ev = Evaluator::new(&enc);
        let items = vec![
            EvalItem::new("a dog barks", &["a dog barks loudly"]).unwrap(),
            EvalItem::new("a bell rings", &["a bell rings twice"]).unwrap(),
        ];
        let r = ev.evaluate(&items, Some(&[0.1, 0.3])).unwrap();
        assert_eq!(r.corpus.spice, Some(0.2));
        assert_eq!(r.corpus.spider, Some((r.corpus.cider_d + 0.2) / 2.0));
        assert!(ev.evaluate(&items, Some(&[0.1])).is_err());
    }

    #[test]
    fn json_uses_six_decimals() {
        let s = CorpusScores {
            cider_d: 1.0 / 3.0,
            spice: None,
            spider: None,
            sbert: -0.0,
            flu_err: 0.0,
            fense: 0.5,
            n_words: 12.0,
        };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"cider_d":0.333333,"sbert":0.000000,"flu_err":0.000000,"fense":0.500000,"n_words":12.000000}"#
        );
        let back: CorpusScores = serde_json::from_str(&j).unwrap();
        assert_eq!(back.fense, 0.5);
    }

    #[test]
    fn cross_reference_folds_exclude_candidate() {
        let enc = encoder();
        let mut ev = Evaluator::new(&enc);
        let same = vec!["a dog barks loudly".to_string(); 5];
        let cr = ev.cross_reference(&[same.clone(), same]).unwrap();
        assert_eq!(cr.folds.len(), 5);
        assert!((cr.mean.sbert - 1.0).abs() < 1e-12);
        assert!((cr.mean.fense - 1.0).abs() < 1e-12);

        let distinct: Vec<String> = (0..5).map(|i| format!("a dog barks {i}")).collect();
        let cr = ev.cross_reference(&[distinct.clone(), vec!["x".into()]]).unwrap();
        assert_eq!(cr.n_items, 1);
        for (i, f) in cr.folds.iter().enumerate() {
            assert_eq!(f.items[0].candidate, distinct[i]);
        }
    }
}
