//! Teacher-forced training with the combined loss, per-epoch validation and
//! best-FENSE model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::decoding::{beam_search, DecodeConfig, Decoded};
use crate::error::{Error, Result};
use crate::metrics::{EvalItem, Evaluator, MetricReport};
use crate::model::{AudioFeatures, Captioner, DropoutCtx, ParamStore, SentenceEncoder};
use crate::objectives::{combined_loss, cross_entropy_sum, ser_loss};
use crate::optim::{adamw_step, clip_global_norm, cosine_lr, is_decay_exempt, AdamState};
use crate::synth::{CaptionedClip, Corpus};
use crate::tensor::{Tape, Tensor};
use crate::text::{TokenId, TokenSequence, Vocabulary, VocabKind, PAD};

/// Corpus, vocabularies and the frozen sentence encoder for one config.
/// Runs that differ only in seeds or loss weights can share it.
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub sentence: SentenceEncoder,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_corpus(cfg, Corpus::generate(&cfg.corpus)?)
    }

    pub fn from_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Self> {
        let captions = corpus.train_captions();
        let sent_vocab = Vocabulary::subword(&captions, 1, cfg.subword_size)?;
        let vocab = match cfg.tokenizer {
            VocabKind::Subword => sent_vocab.clone(),
            VocabKind::Word => Vocabulary::word(&captions, 1)?,
        };
        let m = &cfg.model;
        let sentence = SentenceEncoder::new(sent_vocab, m.d_sent, m.sent_layers, m.sent_heads, m.sent_ffn_dim)?;
        Ok(Self {
            corpus,
            vocab,
            sentence,
        })
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> crate::model::ModelConfig {
        let mut m = cfg.model.clone();
        m.vocab_size = self.vocab.len();
        m
    }

    pub fn decode_config(&self, cfg: &ExperimentConfig) -> Result<DecodeConfig> {
        Ok(cfg.decode_config().with_stopwords(&cfg.stopword_set()?, &self.vocab))
    }
}

/// One (clip, caption) pair ready for teacher forcing.
#[derive(Clone, Debug)]
pub struct Example {
    pub clip: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub reference_embedding: Tensor,
}

pub fn encode_caption(vocab: &Vocabulary, caption: &str, max_len: usize) -> Result<TokenSequence> {
    let seq = vocab.encode(caption);
    if seq.body().len() > max_len {
        return Err(Error::Contract(format!(
            "caption {caption:?} has {} tokens, model.max_len is {max_len}",
            seq.body().len()
        )));
    }
    Ok(seq)
}

pub fn build_examples(prep: &Prepared, clips: &[CaptionedClip], max_len: usize) -> Result<Vec<Example>> {
    let mut session = prep.sentence.session();
    let mut out = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        for cap in &c.captions {
            let seq = encode_caption(&prep.vocab, cap, max_len)?;
            let (inp, tgt) = seq.teacher_forcing()?;
            let e = session.embed_text(cap)?;
            out.push(Example {
                clip: i,
                inputs: inp.to_vec(),
                targets: tgt.to_vec(),
                reference_embedding: Tensor::new(vec![1, e.dim()], e.as_slice().to_vec())?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ce: f64,
    pub val_sbert: f64,
    pub lr: f64,
    /// Missing in curve files that follow the minimal schema.
    #[serde(default = "missing")]
    pub val_fense: f64,
}

fn missing() -> f64 {
    f64::NAN
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub fense: f64,
    pub params: ParamStore,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Captioner,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    pub curve: Vec<CurveRow>,
    pub best: Option<BestModel>,
}

impl TrainState {
    pub fn fresh(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Self> {
        let model = Captioner::new(prep.model_config(cfg), cfg.seed)?;
        let adam = AdamState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            adam,
            rng,
            epoch: 0,
            curve: Vec::new(),
            best: None,
        })
    }
}

/// Teacher-forced CE over `clips` in evaluation mode: total over all
/// non-pad target tokens divided by their count.
pub fn teacher_forced_ce(
    model: &Captioner,
    vocab: &Vocabulary,
    clips: &[CaptionedClip],
    smoothing: f64,
) -> Result<f64> {
    let mut session = model.session();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in clips {
        session.set_features(&c.features)?;
        for cap in &c.captions {
            let seq = encode_caption(vocab, cap, model.config().max_len)?;
            let (inp, tgt) = seq.teacher_forcing()?;
            let logits = session.logits(inp)?;
            let n = tgt.iter().filter(|t| **t != PAD).count();
            let mut tape = Tape::new();
            let z = tape.frozen(&logits);
            let l = cross_entropy_sum(&mut tape, z, tgt, smoothing, 1.0)?;
            total += tape.scalar(l);
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no target tokens to score".into()));
    }
    Ok(total / count as f64)
}

pub fn decode_clip(model: &Captioner, features: &AudioFeatures, cfg: &DecodeConfig) -> Result<Decoded> {
    let mut session = model.session();
    session.set_features(features)?;
    beam_search(&mut session, cfg)
}

/// Beam-decodes every clip and scores the captions against the clip references.
pub fn evaluate_clips(
    model: &Captioner,
    vocab: &Vocabulary,
    clips: &[CaptionedClip],
    dcfg: &DecodeConfig,
    evaluator: &mut Evaluator,
) -> Result<(MetricReport, Vec<String>)> {
    let mut session = model.session();
    let mut items = Vec::with_capacity(clips.len());
    let mut captions = Vec::with_capacity(clips.len());
    for c in clips {
        session.set_features(&c.features)?;
        let d = beam_search(&mut session, dcfg)?;
        let text = vocab.decode(&d.tokens);
        items.push(EvalItem::new(&text, &c.captions)?);
        captions.push(text);
    }
    Ok((evaluator.evaluate(&items, None)?, captions))
}

/// L2 norm over all weight-decayed parameters.
pub fn decayed_param_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|p| p.tensor.requires_grad() && !is_decay_exempt(&p.name))
        .flat_map(|p| p.tensor.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub struct Trainer<'p> {
    pub cfg: ExperimentConfig,
    pub prep: &'p Prepared,
    pub state: TrainState,
    examples: Vec<Example>,
    decode: DecodeConfig,
    evaluator: Evaluator<'p>,
    frozen_fingerprint: u64,
}

impl<'p> Trainer<'p> {
    pub fn new(cfg: ExperimentConfig, prep: &'p Prepared) -> Result<Self> {
        let state = TrainState::fresh(&cfg, prep)?;
        Self::with_state(cfg, prep, state)
    }

    pub fn with_state(cfg: ExperimentConfig, prep: &'p Prepared, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.model.config() != &prep.model_config(&cfg) {
            return Err(Error::Contract("model shape does not match config and vocabulary".into()));
        }
        let examples = build_examples(prep, &prep.corpus.train, cfg.model.max_len)?;
        let decode = prep.decode_config(&cfg)?;
        let mut evaluator = Evaluator::new(&prep.sentence);
        evaluator.aggregation = cfg.sbert_aggregation;
        Ok(Self {
            frozen_fingerprint: prep.sentence.fingerprint(),
            cfg,
            prep,
            state,
            examples,
            decode,
            evaluator,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// One optimiser step on `batch` (indices into the examples); returns the loss.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let cfg = &self.cfg;
        let model = &self.state.model;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let sp = self.prep.sentence.bind(&mut tape);
        let ntok: usize = batch
            .iter()
            .map(|&i| self.examples[i].targets.iter().filter(|t| **t != PAD).count())
            .sum();
        let inv_b = 1.0 / batch.len() as f64;
        let mut total = None;
        for &i in batch {
            let ex = &self.examples[i];
            let feats = &self.prep.corpus.train[ex.clip].features;
            let mem = model.encode_project(&mut tape, &p, feats)?;
            let mut drop = DropoutCtx::train(cfg.model.dropout, &mut self.state.rng);
            let out = model.decode_teacher_forced(&mut tape, &p, mem, &ex.inputs, &mut drop)?;
            let ce = cross_entropy_sum(&mut tape, out.logits, &ex.targets, cfg.loss.label_smoothing, ntok as f64)?;
            let item = if cfg.ser_enabled {
                let proj = model.ser_project(&mut tape, &p, out.token_embeddings)?;
                let pred = self.prep.sentence.body(&mut tape, &sp, proj)?;
                let target = tape.frozen(&ex.reference_embedding);
                let ls = ser_loss(&mut tape, pred, target, &cfg.loss)?;
                let ls = tape.scale(ls, inv_b);
                combined_loss(&mut tape, ce, Some(ls), cfg.loss.lambda)?
            } else {
                ce
            };
            total = Some(match total {
                None => item,
                Some(t) => tape.add(t, item)?,
            });
        }
        let loss = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at epoch {}",
                self.state.epoch
            )));
        }
        tape.backward(loss)?;
        let params = self.state.model.params_mut();
        params.zero_grad();
        params.accumulate_grads(&tape, &p)?;
        clip_global_norm(params, cfg.optim.clip_norm)?;
        adamw_step(params, &mut self.state.adam, lr, &cfg.optim)?;
        Ok(value)
    }

    /// Validation CE, beam-decoded similarity and FENSE on the validation split.
    pub fn validate(&mut self) -> Result<(f64, MetricReport)> {
        let val = &self.prep.corpus.val;
        let ce = teacher_forced_ce(&self.state.model, &self.prep.vocab, val, self.cfg.val_label_smoothing)?;
        let (report, _) = evaluate_clips(&self.state.model, &self.prep.vocab, val, &self.decode, &mut self.evaluator)?;
        Ok((ce, report))
    }

    /// Trains one epoch then validates; returns the new curve row.
    pub fn run_epoch(&mut self) -> Result<CurveRow> {
        let k = self.state.epoch;
        if k >= self.cfg.optim.epochs {
            return Err(Error::Contract(format!("all {k} epochs already completed")));
        }
        let lr = cosine_lr(k, self.cfg.optim.epochs, self.cfg.optim.lr0)?;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut losses = Vec::new();
        for batch in order.chunks(self.cfg.batch_size) {
            losses.push(self.step(batch, lr)?);
        }
        if self.prep.sentence.fingerprint() != self.frozen_fingerprint {
            return Err(Error::Contract("sentence encoder parameters changed".into()));
        }
        let (val_ce, report) = self.validate()?;
        let row = CurveRow {
            epoch: k,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_ce,
            val_sbert: report.corpus.sbert,
            val_fense: report.corpus.fense,
            lr,
        };
        log::info!(
            "epoch {k}: train {:.4} val_ce {:.4} sbert {:.4} fense {:.4} lr {:.2e}",
            row.train_loss,
            row.val_ce,
            row.val_sbert,
            row.val_fense,
            lr
        );
        let improved = self.state.best.as_ref().is_none_or(|b| row.val_fense > b.fense);
        if improved {
            self.state.best = Some(BestModel {
                epoch: k,
                fense: row.val_fense,
                params: self.state.model.params().clone(),
            });
        }
        self.state.curve.push(row.clone());
        self.state.epoch += 1;
        Ok(row)
    }

    /// Runs up to `limit` more epochs (all remaining when `None`).
    pub fn train(&mut self, limit: Option<usize>) -> Result<()> {
        let remaining = self.cfg.optim.epochs - self.state.epoch;
        for _ in 0..limit.map_or(remaining, |l| l.min(remaining)) {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// The selected model: best validation FENSE, or the current one before any epoch.
    pub fn best_model(&self) -> Result<Captioner> {
        let mut m = self.state.model.clone();
        if let Some(b) = &self.state.best {
            m.params_mut().load_values(&b.params)?;
        }
        Ok(m)
    }

    pub fn decode_config(&self) -> &DecodeConfig {
        &self.decode
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.prep.vocab.clone(),
            sentence_vocab: self.prep.sentence.vocab().clone(),
            state: self.state.clone(),
        }
    }

    /// Continues a run from `ck`; `prep` must be rebuilt from the same config.
    pub fn resume(ck: Checkpoint, prep: &'p Prepared) -> Result<Self> {
        if ck.vocab != prep.vocab || &ck.sentence_vocab != prep.sentence.vocab() {
            return Err(Error::Contract("checkpoint vocabulary differs from the prepared corpus".into()));
        }
        Self::with_state(ck.config, prep, ck.state)
    }

    pub fn evaluator(&mut self) -> &mut Evaluator<'p> {
        &mut self.evaluator
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.model.d_model = 8;
        c.model.heads = 2;
        c.model.ffn_dim = 16;
        c.model.decoder_layers = 1;
        c.model.d_sent = 8;
        c.model.sent_heads = 2;
        c.model.sent_ffn_dim = 16;
        c.model.sent_layers = 1;
        c.corpus.train_clips = 6;
        c.corpus.val_clips = 2;
        c.corpus.test_clips = 2;
        c.corpus.d_enc = 8;
        c.model.d_enc = 8;
        c.corpus.frames = 8;
        c.batch_size = 4;
        c.optim.epochs = 3;
        c.max_len = 8;
        c
    }

    #[test]
    fn epochs_append_rows_and_select_best() {
        let cfg = tiny_cfg();
        let prep = Prepared::new(&cfg).unwrap();
        let mut t = Trainer::new(cfg, &prep).unwrap();
        t.train(None).unwrap();
        assert_eq!(t.state.curve.len(), 3);
        let best = t.state.best.as_ref().unwrap();
        let argmax = t
            .state
            .curve
            .iter()
            .fold(None::<&CurveRow>, |acc, r| match acc {
                Some(a) if a.val_fense >= r.val_fense => Some(a),
                _ => Some(r),
            })
            .unwrap();
        assert_eq!(best.epoch, argmax.epoch);
        assert!(t.run_epoch().is_err());
    }

    #[test]
    fn lambda_zero_equals_disabled_branch() {
        let mut a = tiny_cfg();
        a.loss.lambda = 0.0;
        a.optim.epochs = 2;
        let mut b = a.clone();
        b.ser_enabled = false;
        let prep = Prepared::new(&a).unwrap();
        let mut ta = Trainer::new(a, &prep).unwrap();
        let mut tb = Trainer::new(b, &prep).unwrap();
        ta.train(None).unwrap();
        tb.train(None).unwrap();
        assert_eq!(ta.state.curve, tb.state.curve);
        assert_eq!(ta.state.model.params(), tb.state.model.params());
    }

    #[test]
    fn ser_branch_changes_training_when_weighted() {
        let mut a = tiny_cfg();
        a.optim.epochs = 1;
        let mut b = a.clone();
        b.loss.lambda = 0.0;
        let prep = Prepared::new(&a).unwrap();
        let mut ta = Trainer::new(a, &prep).unwrap();
        let mut tb = Trainer::new(b, &prep).unwrap();
        ta.train(None).unwrap();
        tb.train(None).unwrap();
        assert_ne!(ta.state.model.params(), tb.state.model.params());
    }
}
