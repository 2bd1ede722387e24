//! Experiment configuration and its flat `section.key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! [model]
//! d_model = 32        # same as model.d_model = 32
//! loss.lambda = 100
//! ```

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::SbertAggregation;
use crate::model::ModelConfig;
use crate::objectives::{LossConfig, SerKind};
use crate::optim::OptimConfig;
use crate::synth::CorpusConfig;
use crate::text::{StopwordSet, VocabKind, DEFAULT_SUBWORD_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Seeds model initialisation, dropout and batch order.
    pub seed: u64,
    pub n_seeds: usize,
    pub batch_size: usize,
    pub tokenizer: VocabKind,
    pub subword_size: usize,
    /// When false the sentence-embedding branch is never built.
    pub ser_enabled: bool,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub beam_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `english` for the bundled list, otherwise a path.
    pub stopwords: String,
    pub sbert_aggregation: SbertAggregation,
    /// Label smoothing used when reporting validation CE.
    pub val_label_smoothing: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 5,
            batch_size: 64,
            tokenizer: VocabKind::Word,
            subword_size: DEFAULT_SUBWORD_SIZE,
            ser_enabled: true,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            beam_size: 2,
            min_len: 3,
            max_len: 30,
            stopwords: "english".into(),
            sbert_aggregation: SbertAggregation::Mean,
            val_label_smoothing: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("{key} = {v:?}: {e}")))
}

impl ExperimentConfig {
    /// A small model on a reduced corpus that trains in seconds on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            d_model: 32,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            d_sent: 32,
            sent_layers: 2,
            sent_heads: 4,
            sent_ffn_dim: 128,
            ..ModelConfig::default()
        };
        c.batch_size = 16;
        c.subword_size = 128;
        c
    }

    /// Desk corpus with a wider decoder and no dropout, so that without
    /// regularization the validation CE turns upward within the schedule.
    pub fn overfit_study() -> Self {
        let mut c = Self::desk();
        c.model.d_model = 64;
        c.model.ffn_dim = 256;
        c.model.dropout = 0.0;
        c.optim.epochs = 40;
        c
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_seeds" => self.n_seeds = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "tokenizer" => self.tokenizer = parse(key, v)?,
            "subword_size" => self.subword_size = parse(key, v)?,
            "corpus.seed" => self.corpus.seed = parse(key, v)?,
            "corpus.train_clips" => self.corpus.train_clips = parse(key, v)?,
            "corpus.val_clips" => self.corpus.val_clips = parse(key, v)?,
            "corpus.test_clips" => self.corpus.test_clips = parse(key, v)?,
            "corpus.noise_sigma" => self.corpus.noise_sigma = parse(key, v)?,
            "corpus.frames" => self.corpus.frames = parse(key, v)?,
            "corpus.d_enc" => {
                self.corpus.d_enc = parse(key, v)?;
                self.model.d_enc = self.corpus.d_enc;
            }
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.d_enc" => {
                self.model.d_enc = parse(key, v)?;
                self.corpus.d_enc = self.model.d_enc;
            }
            "model.d_sent" => self.model.d_sent = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.sent_layers" => self.model.sent_layers = parse(key, v)?,
            "model.sent_heads" => self.model.sent_heads = parse(key, v)?,
            "model.sent_ffn_dim" => self.model.sent_ffn_dim = parse(key, v)?,
            "loss.label_smoothing" => self.loss.label_smoothing = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.ser" => self.loss.ser_kind = parse::<SerKind>(key, v)?,
            "loss.ser_enabled" => self.ser_enabled = parse(key, v)?,
            "loss.val_label_smoothing" => self.val_label_smoothing = parse(key, v)?,
            "optim.lr0" => self.optim.lr0 = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.wd" => self.optim.weight_decay = parse(key, v)?,
            "optim.clip_norm" => self.optim.clip_norm = parse(key, v)?,
            "optim.epochs" => self.optim.epochs = parse(key, v)?,
            "decode.beam" => self.beam_size = parse(key, v)?,
            "decode.min_len" => self.min_len = parse(key, v)?,
            "decode.max_len" => self.max_len = parse(key, v)?,
            "decode.stopwords" => self.stopwords = v.to_string(),
            "metrics.sbert_aggregation" => self.sbert_aggregation = parse(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let c = &self.corpus;
        vec![
            ("seed", self.seed.to_string()),
            ("n_seeds", self.n_seeds.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tokenizer", self.tokenizer.to_string()),
            ("subword_size", self.subword_size.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("corpus.train_clips", c.train_clips.to_string()),
            ("corpus.val_clips", c.val_clips.to_string()),
            ("corpus.test_clips", c.test_clips.to_string()),
            ("corpus.noise_sigma", c.noise_sigma.to_string()),
            ("corpus.frames", c.frames.to_string()),
            ("corpus.d_enc", c.d_enc.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.d_sent", m.d_sent.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.sent_layers", m.sent_layers.to_string()),
            ("model.sent_heads", m.sent_heads.to_string()),
            ("model.sent_ffn_dim", m.sent_ffn_dim.to_string()),
            ("loss.label_smoothing", self.loss.label_smoothing.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.ser", self.loss.ser_kind.to_string()),
            ("loss.ser_enabled", self.ser_enabled.to_string()),
            ("loss.val_label_smoothing", self.val_label_smoothing.to_string()),
            ("optim.lr0", self.optim.lr0.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.wd", self.optim.weight_decay.to_string()),
            ("optim.clip_norm", self.optim.clip_norm.to_string()),
            ("optim.epochs", self.optim.epochs.to_string()),
            ("decode.beam", self.beam_size.to_string()),
            ("decode.min_len", self.min_len.to_string()),
            ("decode.max_len", self.max_len.to_string()),
            ("decode.stopwords", self.stopwords.clone()),
            ("metrics.sbert_aggregation", self.sbert_aggregation.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if !seen.insert(key.clone()) {
                return Err(Error::config(format!("line {}: duplicate key {key}", n + 1)));
            }
            self.set(&key, v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(5);
        m.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.decode_config().validate()?;
        if self.batch_size == 0 || self.n_seeds == 0 {
            return Err(Error::config("batch_size and n_seeds must be >= 1"));
        }
        if self.model.d_enc != self.corpus.d_enc {
            return Err(Error::config("model.d_enc must equal corpus.d_enc"));
        }
        if self.max_len > self.model.max_len {
            return Err(Error::config(format!(
                "decode.max_len {} exceeds model.max_len {}",
                self.max_len, self.model.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.val_label_smoothing) {
            return Err(Error::config("loss.val_label_smoothing must be in [0, 1)"));
        }
        if self.stopwords != "english" && !PathBuf::from(&self.stopwords).exists() {
            return Err(Error::config(format!("stopword file {} not found", self.stopwords)));
        }
        Ok(())
    }

    /// Decoding settings without stopword ids; those need a vocabulary.
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            min_len: self.min_len,
            max_len: self.max_len,
            stopword_ids: Default::default(),
        }
    }

    pub fn stopword_set(&self) -> Result<StopwordSet> {
        if self.stopwords == "english" {
            Ok(StopwordSet::english())
        } else {
            StopwordSet::load(&self.stopwords)
        }
    }
}
