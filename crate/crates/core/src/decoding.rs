//! Constrained generation: beam search, greedy, and an exhaustive oracle.
//!
//! Lengths count emitted tokens, excluding `BOS` and `EOS`. A token may not
//! appear twice in the emitted part unless it is a stopword.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InferenceSession;
use crate::text::{StopwordSet, TokenId, TokenSequence, Vocabulary, BOS, EOS, PAD};
use crate::util::Fnv1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Token ids exempt from the no-repeat rule.
    pub stopword_ids: BTreeSet<TokenId>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 2,
            min_len: 3,
            max_len: 30,
            stopword_ids: BTreeSet::new(),
        }
    }
}

impl DecodeConfig {
    pub fn with_stopwords(mut self, stopwords: &StopwordSet, vocab: &Vocabulary) -> Self {
        self.stopword_ids = stopwords.ids_in(vocab);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("decode.beam must be >= 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "need 1 <= min_len ({}) <= max_len ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Source of next-token logits for a prefix that starts with `BOS`.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn logits(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

impl NextTokenScorer for InferenceSession<'_> {
    fn vocab_size(&self) -> usize {
        self.model().config().vocab_size
    }

    fn logits(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.step_logits(prefix)
    }
}

/// Deterministic pseudo-model: logits are Gaussian draws seeded by a hash of
/// the prefix, so every prefix gets its own fixed distribution.
#[derive(Clone, Debug)]
pub struct HashedToyModel {
    pub vocab_size: usize,
    pub seed: u64,
    pub scale: f64,
}

impl NextTokenScorer for HashedToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut h = Fnv1a::new();
        h.write(&self.seed.to_le_bytes());
        for t in prefix {
            h.write(&(*t as u64).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        Ok((0..self.vocab_size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.scale * z
            })
            .collect())
    }
}

/// Legal next tokens after `prefix` (which starts with `BOS`).
pub fn allowed_tokens(prefix: &[TokenId], vocab_size: usize, cfg: &DecodeConfig) -> Vec<bool> {
    let emitted = prefix.len().saturating_sub(1);
    let mut mask = vec![true; vocab_size];
    if emitted >= cfg.max_len {
        mask.iter_mut().for_each(|m| *m = false);
        if EOS < vocab_size {
            mask[EOS] = true;
        }
        return mask;
    }
    for special in [PAD, BOS] {
        if special < vocab_size {
            mask[special] = false;
        }
    }
    if emitted < cfg.min_len && EOS < vocab_size {
        mask[EOS] = false;
    }
    for &t in prefix.iter().skip(1) {
        if t < vocab_size && !cfg.stopword_ids.contains(&t) {
            mask[t] = false;
        }
    }
    mask
}

/// `true` if the emitted sequence obeys the length and repetition rules.
pub fn satisfies_constraints(seq: &TokenSequence, cfg: &DecodeConfig) -> bool {
    let ids = seq.ids();
    if ids.first() != Some(&BOS) || ids.last() != Some(&EOS) {
        return false;
    }
    let body = &ids[1..ids.len() - 1];
    if body.len() < cfg.min_len || body.len() > cfg.max_len {
        return false;
    }
    let mut seen = BTreeSet::new();
    body.iter().all(|&t| {
        t != PAD && t != BOS && t != EOS && (cfg.stopword_ids.contains(&t) || seen.insert(t))
    })
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSequence,
    pub log_prob: f64,
}

fn scored_next<S: NextTokenScorer + ?Sized>(
    scorer: &mut S,
    prefix: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<(TokenId, f64)>> {
    let v = scorer.vocab_size();
    let logits = scorer.logits(prefix)?;
    if logits.len() != v {
        return Err(Error::dim(format!("scorer returned {} logits for vocab {v}", logits.len())));
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    let lp = log_softmax(&logits);
    let mask = allowed_tokens(prefix, v, cfg);
    Ok((0..v).filter(|&c| mask[c]).map(|c| (c, lp[c])).collect())
}

fn finish(best: Option<BeamHypothesis>) -> Result<Decoded> {
    let h = best.ok_or_else(|| Error::Decode("no hypothesis could satisfy the constraints".into()))?;
    Ok(Decoded {
        tokens: TokenSequence::new(h.tokens)?,
        log_prob: h.log_prob,
    })
}

/// Beam search without length normalisation. Each step keeps the
/// `beam_size` best expansions; those ending in `EOS` are set aside as
/// finished. Search stops once no live hypothesis can beat the best finished one.
pub fn beam_search<S: NextTokenScorer + ?Sized>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let mut live = vec![BeamHypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut best: Option<BeamHypothesis> = None;
    while !live.is_empty() {
        let mut cands = Vec::new();
        for h in &live {
            for (tok, lp) in scored_next(scorer, &h.tokens, cfg)? {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push(BeamHypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: tok == EOS,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(cfg.beam_size);
        live.clear();
        for c in cands {
            if c.finished {
                if best.as_ref().is_none_or(|b| rank(&c, b) == Ordering::Less) {
                    best = Some(c);
                }
            } else {
                live.push(c);
            }
        }
        // scores only decrease, so a finished hypothesis at least as good as
        // every live one cannot be overtaken
        if let (Some(b), Some(top)) = (&best, live.first()) {
            if b.log_prob >= top.log_prob {
                break;
            }
        }
    }
    finish(best)
}

/// Argmax decoding under the same masks.
pub fn greedy<S: NextTokenScorer + ?Sized>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let mut tokens = vec![BOS];
    let mut total = 0.0;
    loop {
        let next = scored_next(scorer, &tokens, cfg)?;
        let (tok, lp) = next
            .into_iter()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .ok_or_else(|| Error::Decode("greedy decode reached a dead end".into()))?;
        tokens.push(tok);
        total += lp;
        if tok == EOS {
            return finish(Some(BeamHypothesis {
                tokens,
                log_prob: total,
                finished: true,
            }));
        }
    }
}

/// Upper bound on `vocab_size^max_len` accepted by [`exhaustive_search`].
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

/// Enumerates every legal sequence; test oracle for [`beam_search`].
pub fn exhaustive_search<S: NextTokenScorer + ?Sized>(scorer: &mut S, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let space = (scorer.vocab_size() as f64).powi(cfg.max_len as i32);
    if space > EXHAUSTIVE_LIMIT {
        return Err(Error::Contract(format!(
            "exhaustive search over {space:e} sequences exceeds the {EXHAUSTIVE_LIMIT:e} guard"
        )));
    }
    fn dfs<S: NextTokenScorer + ?Sized>(
        scorer: &mut S,
        cfg: &DecodeConfig,
        prefix: &mut Vec<TokenId>,
        score: f64,
        best: &mut Option<BeamHypothesis>,
    ) -> Result<()> {
        for (tok, lp) in scored_next(scorer, prefix, cfg)? {
            prefix.push(tok);
            if tok == EOS {
                let h = BeamHypothesis {
                    tokens: prefix.clone(),
                    log_prob: score + lp,
                    finished: true,
                };
                if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
                    *best = Some(h);
                }
            } else {
                dfs(scorer, cfg, prefix, score + lp, best)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut best = None;
    dfs(scorer, cfg, &mut vec![BOS], 0.0, &mut best)?;
    finish(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Returns the same fixed logits whatever the prefix.
    struct Fixed(Vec<f64>);

    impl NextTokenScorer for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn logits(&mut self, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cfg(beam: usize, min: usize, max: usize, stop: &[TokenId]) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            min_len: min,
            max_len: max,
            stopword_ids: stop.iter().copied().collect(),
        }
    }

    #[test]
    fn mask_rules() {
        let c = cfg(2, 3, 5, &[4]);
        let m = allowed_tokens(&[BOS], 8, &c);
        assert!(!m[EOS] && !m[PAD] && !m[BOS] && m[4] && m[5]);
        let m = allowed_tokens(&[BOS, 5, 4], 8, &c);
        assert!(!m[5], "non-stopword repeat banned");
        assert!(m[4], "stopword repeat allowed");
        let m = allowed_tokens(&[BOS, 5, 4, 6], 8, &c);
        assert!(m[EOS]);
        let m = allowed_tokens(&[BOS, 5, 4, 6, 4, 7], 8, &c);
        assert_eq!(m.iter().filter(|x| **x).count(), 1);
        assert!(m[EOS]);
    }

    #[test]
    fn forced_distribution_hand_case() {
        // token 4 dominates but may only repeat if it is a stopword
        let logits = vec![0.0, 0.0, 1.0, 0.0, 10.0, 2.0, 1.5, 0.5];
        let out = exhaustive_search(&mut Fixed(logits.clone()), &cfg(1, 3, 4, &[])).unwrap();
        assert_eq!(out.tokens.ids(), &[BOS, 4, 5, 6, EOS]);
        let out = exhaustive_search(&mut Fixed(logits.clone()), &cfg(1, 3, 4, &[4])).unwrap();
        assert_eq!(out.tokens.ids(), &[BOS, 4, 4, 4, EOS]);
        // greedy keeps taking 4 while it outranks eos, overshooting the optimum
        let g = greedy(&mut Fixed(logits.clone()), &cfg(1, 3, 4, &[4])).unwrap();
        assert_eq!(g.tokens.ids(), &[BOS, 4, 4, 4, 4, EOS]);
        assert!(g.log_prob < out.log_prob);
        let b = beam_search(&mut Fixed(logits), &cfg(50, 3, 4, &[4])).unwrap();
        assert_eq!(b.tokens, out.tokens);
    }

    #[test]
    fn unfinishable_is_decode_error() {
        // only unk and one word are emittable, so three distinct tokens are impossible
        let c = cfg(2, 3, 4, &[]);
        let r = beam_search(&mut Fixed(vec![0.0; 5]), &c);
        assert!(matches!(r, Err(Error::Decode(_))));
        assert!(matches!(greedy(&mut Fixed(vec![0.0; 5]), &c), Err(Error::Decode(_))));
    }

    #[test]
    fn exhaustive_guard() {
        let mut m = HashedToyModel {
            vocab_size: 40,
            seed: 0,
            scale: 1.0,
        };
        assert!(exhaustive_search(&mut m, &cfg(1, 1, 5, &[])).is_err());
    }

    #[test]
    fn log_prob_is_sum_of_token_log_probs() {
        let mut m = HashedToyModel {
            vocab_size: 9,
            seed: 3,
            scale: 2.0,
        };
        let c = cfg(3, 2, 4, &[4]);
        let out = beam_search(&mut m, &c).unwrap();
        let ids = out.tokens.ids();
        let mut total = 0.0;
        for i in 1..ids.len() {
            let lp = log_softmax(&m.logits(&ids[..i]).unwrap());
            total += lp[ids[i]];
        }
        assert!((total - out.log_prob).abs() < 1e-12);
    }

    fn toy(seed: u64, vocab: usize) -> HashedToyModel {
        HashedToyModel {
            vocab_size: vocab,
            seed,
            scale: 2.0,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn full_beam_matches_exhaustive(seed in any::<u64>(), vocab in 6usize..=8, max in 2usize..=4, min in 1usize..=2) {
            let c = cfg(usize::MAX, min.min(max), max, &[4]);
            let e = exhaustive_search(&mut toy(seed, vocab), &c).unwrap();
            let b = beam_search(&mut toy(seed, vocab), &c).unwrap();
            prop_assert_eq!(b.tokens, e.tokens);
        }

        #[test]
        fn beam_one_is_greedy(seed in any::<u64>(), vocab in 6usize..=12) {
            let c = cfg(1, 2, 5, &[4, 5]);
            let g = greedy(&mut toy(seed, vocab), &c).unwrap();
            let b = beam_search(&mut toy(seed, vocab), &c).unwrap();
            prop_assert_eq!(b, g);
        }

        // Widening is not monotone in general (a wider beam can prune the path
        // a narrower one followed), but the complete beam dominates every width.
        #[test]
        fn complete_beam_dominates_every_width(seed in any::<u64>(), beam in 1usize..=6) {
            let c = cfg(beam, 2, 4, &[4]);
            let narrow = beam_search(&mut toy(seed, 8), &c).unwrap();
            let full = beam_search(&mut toy(seed, 8), &cfg(usize::MAX, 2, 4, &[4])).unwrap();
            prop_assert!(full.log_prob >= narrow.log_prob);
        }

        #[test]
        fn outputs_satisfy_constraints(seed in any::<u64>(), vocab in 7usize..=16, beam in 1usize..=4) {
            let c = cfg(beam, 3, 6, &[4]);
            let b = beam_search(&mut toy(seed, vocab), &c).unwrap();
            prop_assert!(satisfies_constraints(&b.tokens, &c));
        }
    }
}
