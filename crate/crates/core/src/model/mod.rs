//! Audio-feature projection, transformer decoder with token-classifier and
//! sentence-embedding-regression heads, and the frozen sentence encoder.

mod captioner;
pub mod layers;
pub mod params;
mod sentence;

pub use captioner::{Captioner, DecoderOutput, InferenceSession};
pub use layers::DropoutCtx;
pub use params::{Param, ParamStore};
pub use sentence::{SentenceEmbedding, SentenceEncoder, SentenceSession, SENTENCE_ENCODER_SEED};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub d_enc: usize,
    pub d_sent: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub sent_layers: usize,
    pub sent_heads: usize,
    pub sent_ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            decoder_layers: 6,
            heads: 4,
            ffn_dim: 1024,
            dropout: 0.2,
            d_enc: 64,
            d_sent: 768,
            max_len: 30,
            vocab_size: 0,
            sent_layers: 2,
            sent_heads: 4,
            sent_ffn_dim: 3072,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("d_enc", self.d_enc),
            ("d_sent", self.d_sent),
            ("max_len", self.max_len),
            ("sent_layers", self.sent_layers),
            ("sent_heads", self.sent_heads),
            ("sent_ffn_dim", self.sent_ffn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be >= 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_sent % self.sent_heads != 0 {
            return Err(Error::config(format!(
                "d_sent {} not divisible by {} heads",
                self.d_sent, self.sent_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.vocab_size < 5 {
            return Err(Error::config(format!(
                "vocab_size {} must be >= 5",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Encoder output for one clip: `T × d_enc` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures(Tensor);

impl AudioFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        match frames.shape() {
            [t, d] if *t >= 1 && *d >= 1 => {}
            other => {
                return Err(Error::dim(format!(
                    "audio features must be T×d_enc with T >= 1, got {other:?}"
                )))
            }
        }
        if frames.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("audio features".into()));
        }
        Ok(Self(frames))
    }

    pub fn from_rows(frames: usize, d_enc: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![frames, d_enc], data)?)
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}
