use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{sinusoidal_positions, EncoderLayer, Linear};
use super::params::{normal, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{normalize, TokenId, Vocabulary, EOS};
use crate::util::Fnv1a;

/// Seed for the surrogate's body and head. Token rows mix this with a hash of
/// the token string so the table does not depend on vocabulary order.
pub const SENTENCE_ENCODER_SEED: u64 = 0x5e17_e9ce_0000_0768;

/// One pooled sentence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::dim("empty sentence embedding"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sentence embedding".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity; 0 when either vector has zero norm.
    pub fn cosine(&self, other: &SentenceEmbedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

/// Frozen stand-in for a pretrained sentence encoder: token table, a small
/// bidirectional transformer, mean pooling, linear head.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    vocab: Vocabulary,
    d_sent: usize,
    params: ParamStore,
    table: usize,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

impl SentenceEncoder {
    pub fn new(vocab: Vocabulary, d_sent: usize, layers: usize, heads: usize, ffn: usize) -> Result<Self> {
        if d_sent == 0 || heads == 0 || ffn == 0 || d_sent % heads != 0 {
            return Err(Error::config(format!(
                "sentence encoder dims invalid: d_sent {d_sent}, heads {heads}, ffn {ffn}"
            )));
        }
        let mut params = ParamStore::new();
        let mut rows = Vec::with_capacity(vocab.len() * d_sent);
        for tok in vocab.tokens() {
            let mut h = Fnv1a::new();
            h.write(tok.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish() ^ SENTENCE_ENCODER_SEED);
            rows.extend(normal(&mut rng, vec![d_sent], 1.0).into_data());
        }
        let table = params.add("sent.embed.weight", Tensor::new(vec![vocab.len(), d_sent], rows)?);
        let mut rng = ChaCha8Rng::seed_from_u64(SENTENCE_ENCODER_SEED);
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("sent.layers.{i}"), d_sent, heads, ffn, &mut rng))
            .collect();
        let head = Linear::new(&mut params, "sent.head", d_sent, d_sent, &mut rng);
        // shrink the head so embeddings have roughly unit norm, like the
        // pretrained encoders this stands in for
        let shrink = 1.0 / (d_sent as f64).sqrt();
        if let Some(w) = params.by_name_mut("sent.head.weight") {
            w.tensor.data_mut().iter_mut().for_each(|x| *x *= shrink);
        }
        for p in params.iter_mut() {
            p.tensor.set_requires_grad(false);
        }
        Ok(Self {
            vocab,
            d_sent,
            params,
            table,
            layers,
            head,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.d_sent
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn table_row(&self, id: TokenId) -> &[f64] {
        self.params.get(self.table).tensor.row(id)
    }

    /// Ids the encoder reads for `text`: subword body followed by `EOS`.
    pub fn reference_ids(&self, text: &str) -> Vec<TokenId> {
        let seq = self.vocab.subword_tokenize(&normalize(text));
        let mut ids = seq.body().to_vec();
        ids.push(EOS);
        ids
    }

    /// Records the parameters on `tape` as non-differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind_frozen(tape)
    }

    /// Body only: `vectors` is `L × d_sent`, output is `1 × d_sent`.
    pub fn body(&self, tape: &mut Tape, p: &[Var], vectors: Var) -> Result<Var> {
        let shape = tape.shape(vectors).to_vec();
        if shape.len() != 2 || shape[1] != self.d_sent || shape[0] == 0 {
            return Err(Error::dim(format!(
                "sentence body expects L×{} with L >= 1, got {shape:?}",
                self.d_sent
            )));
        }
        let mut x = tape.add_const(vectors, &sinusoidal_positions(shape[0], self.d_sent))?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        let pooled = tape.mean_rows(x)?;
        self.head.forward(tape, p, pooled)
    }

    /// Full path: table lookup followed by the body.
    pub fn full(&self, tape: &mut Tape, p: &[Var], ids: &[TokenId]) -> Result<Var> {
        let x = tape.embedding(p[self.table], ids)?;
        self.body(tape, p, x)
    }

    pub fn session(&self) -> SentenceSession<'_> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        SentenceSession {
            enc: self,
            tape,
            params,
        }
    }

    pub fn embed_ids(&self, ids: &[TokenId]) -> Result<SentenceEmbedding> {
        self.session().embed_ids(ids)
    }

    pub fn embed_text(&self, text: &str) -> Result<SentenceEmbedding> {
        self.session().embed_text(text)
    }

    pub fn embed_vectors(&self, vectors: &Tensor) -> Result<SentenceEmbedding> {
        self.session().embed_vectors(vectors)
    }
}

/// Reuses one parameter binding across many embeddings.
pub struct SentenceSession<'e> {
    enc: &'e SentenceEncoder,
    tape: Tape,
    params: Vec<Var>,
}

impl SentenceSession<'_> {
    pub fn embed_ids(&mut self, ids: &[TokenId]) -> Result<SentenceEmbedding> {
        if ids.is_empty() {
            return Err(Error::dim("cannot embed an empty token sequence"));
        }
        self.tape.truncate(self.params.len());
        let y = self.enc.full(&mut self.tape, &self.params, ids)?;
        SentenceEmbedding::new(self.tape.value(y).to_vec())
    }

    pub fn embed_text(&mut self, text: &str) -> Result<SentenceEmbedding> {
        let ids = self.enc.reference_ids(text);
        self.embed_ids(&ids)
    }

    pub fn embed_vectors(&mut self, vectors: &Tensor) -> Result<SentenceEmbedding> {
        self.tape.truncate(self.params.len());
        let x = self.tape.frozen(vectors);
        let y = self.enc.body(&mut self.tape, &self.params, x)?;
        SentenceEmbedding::new(self.tape.value(y).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::text::VocabKind;

    fn encoder(d: usize) -> SentenceEncoder {
        let corpus = ["a dog barks loudly", "rain falls on a roof", "a car passes by"];
        let vocab = Vocabulary::subword(&corpus, 1, 64).unwrap();
        SentenceEncoder::new(vocab, d, 2, 4, 2 * d).unwrap()
    }

    #[test]
    fn same_text_same_embedding() {
        let e = encoder(16);
        let a = e.embed_text("a dog barks").unwrap();
        let b = e.embed_text("A dog barks!").unwrap();
        assert_eq!(a, b);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_changes_embedding() {
        let e = encoder(16);
        let a = e.embed_text("a dog barks").unwrap();
        let b = e.embed_text("barks dog a").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bypass_identity_is_exact() {
        let e = encoder(16);
        let ids = e.reference_ids("rain falls on a car");
        let rows: Vec<f64> = ids.iter().flat_map(|&i| e.table_row(i).to_vec()).collect();
        let vecs = Tensor::new(vec![ids.len(), 16], rows).unwrap();
        assert_eq!(e.embed_ids(&ids).unwrap(), e.embed_vectors(&vecs).unwrap());
    }

    #[test]
    fn table_rows_keyed_by_token_string() {
        let e = encoder(8);
        let other = Vocabulary::from_tokens(VocabKind::Subword, vec!["zzz".into(), "dog".into()]).unwrap();
        let f = SentenceEncoder::new(other, 8, 2, 4, 16).unwrap();
        let id_e = e.vocab().id("dog").unwrap();
        let id_f = f.vocab().id("dog").unwrap();
        assert_ne!(id_e, id_f);
        assert_eq!(e.table_row(id_e), f.table_row(id_f));
    }

    #[test]
    fn gradient_reaches_inputs_not_params() {
        let e = encoder(8);
        let mut tape = Tape::new();
        let p = e.bind(&mut tape);
        let x = tape.leaf(&Tensor::from_fn(vec![3, 8], |i| (i as f64 * 0.37).sin()).with_grad());
        let y = e.body(&mut tape, &p, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().any(|g| *g != 0.0));
        assert!(p.iter().all(|v| tape.grad(*v).is_none()));
    }

    #[test]
    fn body_grad_check_wrt_inputs() {
        let e = encoder(8);
        let target = Tensor::from_fn(vec![1, 8], |i| (i as f64).cos());
        let point = Tensor::from_fn(vec![3, 8], |i| (i as f64 * 0.71).sin());
        let report = grad_check(
            |tape: &mut Tape, x: Var| {
                let p = e.bind(tape);
                let y = e.body(tape, &p, x)?;
                let t = tape.frozen(&target);
                tape.mse(y, t)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn default_dims_produce_768() {
        let corpus = ["a dog barks"];
        let vocab = Vocabulary::subword(&corpus, 1, 32).unwrap();
        let e = SentenceEncoder::new(vocab, 768, 1, 4, 64).unwrap();
        assert_eq!(e.embed_text("a dog").unwrap().dim(), 768);
    }
}
