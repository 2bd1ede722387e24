//! Binary checkpoints: config snapshot, vocabularies, current and best
//! parameters, optimiser moments, learning curve and RNG position.
//!
//! All integers and floats are little-endian; strings and arrays are
//! length-prefixed with a `u64`. Writing is a pure function of the state, so
//! save → load → save reproduces the same bytes.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::ExperimentConfig;
use super::train::{BestModel, CurveRow, TrainState};
use crate::error::{Error, Result};
use crate::model::{Captioner, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub sentence_vocab: Vocabulary,
    pub state: TrainState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|x| self.f64(*x));
    }

    fn params(&mut self, p: &ParamStore) {
        self.u64(p.len() as u64);
        for param in p.iter() {
            self.str(&param.name);
            self.u64(param.tensor.shape().len() as u64);
            param.tensor.shape().iter().for_each(|d| self.u64(*d as u64));
            self.f64s(param.tensor.data());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n as usize > self.buf.len() {
            return Err(Error::format(format!("implausible length {n} in checkpoint")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::format(format!("checkpoint string: {e}")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a parameter block into `into`, which fixes names and shapes.
    fn params(&mut self, into: &mut ParamStore) -> Result<()> {
        let n = self.len()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.len()?;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            store.add(name, Tensor::new(shape, self.f64s()?)?);
        }
        into.load_values(&store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.config.to_text());
        w.str(&self.vocab.to_file_string());
        w.str(&self.sentence_vocab.to_file_string());
        let s = &self.state;
        w.u64(s.epoch as u64);
        w.params(s.model.params());
        match &s.best {
            None => w.u64(0),
            Some(b) => {
                w.u64(1);
                w.u64(b.epoch as u64);
                w.f64(b.fense);
                w.params(&b.params);
            }
        }
        w.u64(s.adam.step);
        w.u64(s.adam.m.len() as u64);
        for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
            w.f64s(m);
            w.f64s(v);
        }
        w.u64(s.curve.len() as u64);
        for r in &s.curve {
            w.u64(r.epoch as u64);
            for x in [r.train_loss, r.val_ce, r.val_sbert, r.val_fense, r.lr] {
                w.f64(x);
            }
        }
        w.bytes(&s.rng.get_seed());
        w.u64(s.rng.get_stream());
        w.0.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let config = ExperimentConfig::parse(&r.str()?)?;
        let vocab = Vocabulary::parse(&r.str()?)?;
        let sentence_vocab = Vocabulary::parse(&r.str()?)?;
        let epoch = r.len()?;
        let mut mc = config.model.clone();
        mc.vocab_size = vocab.len();
        let mut model = Captioner::new(mc, config.seed)?;
        r.params(model.params_mut())?;
        let best = match r.u64()? {
            0 => None,
            1 => {
                let epoch = r.len()?;
                let fense = r.f64()?;
                let mut params = model.params().clone();
                r.params(&mut params)?;
                Some(BestModel { epoch, fense, params })
            }
            t => return Err(Error::format(format!("bad best-model tag {t}"))),
        };
        let step = r.u64()?;
        let n = r.len()?;
        let mut adam = AdamState {
            step,
            m: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        };
        for _ in 0..n {
            adam.m.push(r.f64s()?);
            adam.v.push(r.f64s()?);
        }
        if adam.m.len() != model.params().len() {
            return Err(Error::format("optimizer state does not match parameters"));
        }
        let rows = r.len()?;
        let mut curve = Vec::with_capacity(rows);
        for _ in 0..rows {
            curve.push(CurveRow {
                epoch: r.len()?,
                train_loss: r.f64()?,
                val_ce: r.f64()?,
                val_sbert: r.f64()?,
                val_fense: r.f64()?,
                lr: r.f64()?,
            });
        }
        let seed: [u8; 32] = r
            .bytes()?
            .try_into()
            .map_err(|_| Error::format("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")));
        if r.pos != buf.len() {
            return Err(Error::format(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            sentence_vocab,
            state: TrainState {
                model,
                adam,
                rng,
                epoch,
                curve,
                best,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The best-FENSE model, or the current one if no epoch has finished.
    pub fn best_model(&self) -> Result<Captioner> {
        let mut m = self.state.model.clone();
        if let Some(b) = &self.state.best {
            m.params_mut().load_values(&b.params)?;
        }
        Ok(m)
    }
}
