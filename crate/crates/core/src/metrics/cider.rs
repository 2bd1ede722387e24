//! CIDEr-D: TF-IDF weighted n-gram cosine with clipping and a Gaussian
//! length penalty, scaled by 10.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;

type Counts = BTreeMap<Vec<String>, f64>;

fn ngram_counts(words: &[String]) -> [Counts; MAX_N] {
    let mut out: [Counts; MAX_N] = Default::default();
    for n in 1..=MAX_N {
        for w in words.windows(n) {
            *out[n - 1].entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct Weighted {
    vecs: [Counts; MAX_N],
    norms: [f64; MAX_N],
    len: f64,
}

fn weigh(counts: [Counts; MAX_N], len: usize, df: &[BTreeMap<Vec<String>, f64>; MAX_N], log_n: f64) -> Weighted {
    let mut vecs = counts;
    let mut norms = [0.0; MAX_N];
    for n in 0..MAX_N {
        for (g, tf) in vecs[n].iter_mut() {
            let d = df[n].get(g).copied().unwrap_or(0.0).max(1.0);
            *tf *= log_n - d.ln();
            norms[n] += *tf * *tf;
        }
    }
    Weighted {
        vecs,
        norms,
        len: len as f64,
    }
}

fn similarity(hyp: &Weighted, reference: &Weighted) -> [f64; MAX_N] {
    let delta = hyp.len - reference.len;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    let mut val = [0.0; MAX_N];
    for n in 0..MAX_N {
        for (g, h) in &hyp.vecs[n] {
            if let Some(r) = reference.vecs[n].get(g) {
                val[n] += h.min(*r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val[n] /= (hyp.norms[n] * reference.norms[n]).sqrt();
        }
        val[n] *= penalty;
    }
    val
}

/// Scores tokenised candidates against their references. Returns the corpus
/// mean and the per-item scores. Document frequencies are taken over each
/// item's reference set, so the IDF corpus is the evaluated set itself.
pub fn cider_d_tokens(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Contract("CIDEr-D over an empty item list".into()));
    }
    let mut df: [BTreeMap<Vec<String>, f64>; MAX_N] = Default::default();
    for (i, (_, refs)) in items.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::Contract(format!("item {i} has no references")));
        }
        let mut seen: [BTreeSet<Vec<String>>; MAX_N] = Default::default();
        for r in refs {
            for (n, c) in ngram_counts(r).into_iter().enumerate() {
                seen[n].extend(c.into_keys());
            }
        }
        for n in 0..MAX_N {
            for g in std::mem::take(&mut seen[n]) {
                *df[n].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let log_n = (items.len() as f64).ln();
    let mut scores = Vec::with_capacity(items.len());
    for (cand, refs) in items {
        let hyp = weigh(ngram_counts(cand), cand.len(), &df, log_n);
        let mut acc = [0.0; MAX_N];
        for r in refs {
            let rv = weigh(ngram_counts(r), r.len(), &df, log_n);
            let s = similarity(&hyp, &rv);
            for n in 0..MAX_N {
                acc[n] += s[n];
            }
        }
        let mean_n = acc.iter().sum::<f64>() / MAX_N as f64;
        scores.push(mean_n / refs.len() as f64 * 10.0);
    }
    let corpus = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((corpus, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn item(c: &str, refs: &[&str]) -> (Vec<String>, Vec<Vec<String>>) {
        (toks(c), refs.iter().map(|r| toks(r)).collect())
    }

    #[test]
    fn identical_scores_ten() {
        let items = vec![
            item("a dog barks loudly outside", &["a dog barks loudly outside"]),
            item("rain falls on a tin roof", &["rain falls on a tin roof"]),
        ];
        let (c, per) = cider_d_tokens(&items).unwrap();
        assert_eq!(per, vec![10.0, 10.0]);
        assert_eq!(c, 10.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let items = vec![
            item("engine idles", &["a dog barks loudly"]),
            item("birds chirp", &["rain falls on a roof"]),
        ];
        let (c, _) = cider_d_tokens(&items).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_item_corpus_has_zero_idf() {
        let items = vec![item("a dog barks", &["a dog barks"])];
        assert_eq!(cider_d_tokens(&items).unwrap().0, 0.0);
    }

    #[test]
    fn reference_order_does_not_matter() {
        let a = vec![
            item("a dog barks", &["a dog barks loudly", "a puppy yaps", "dogs bark"]),
            item("a man speaks", &["a man talks", "someone speaks"]),
        ];
        let b = vec![
            item("a dog barks", &["dogs bark", "a dog barks loudly", "a puppy yaps"]),
            item("a man speaks", &["someone speaks", "a man talks"]),
        ];
        let (x, y) = (cider_d_tokens(&a).unwrap().1, cider_d_tokens(&b).unwrap().1);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_reference_set_rejected() {
        assert!(cider_d_tokens(&[item("a", &[])]).is_err());
    }
}
