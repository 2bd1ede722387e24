use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{sinusoidal_positions, DecoderLayer, DropoutCtx, Linear};
use super::params::{normal, ParamStore};
use super::{AudioFeatures, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{TokenId, TokenSequence, BOS};

/// Per-position decoder states `ê_t` and the classifier logits computed from them.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub token_embeddings: Var,
    pub logits: Var,
}

/// Projection of frozen audio features, a post-norm transformer decoder, an
/// untied token classifier and the projection into sentence-embedding space.
#[derive(Clone, Debug)]
pub struct Captioner {
    config: ModelConfig,
    params: ParamStore,
    proj: Linear,
    embed: usize,
    layers: Vec<DecoderLayer>,
    classifier: Linear,
    ser_proj: Linear,
}

impl Captioner {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let proj = Linear::new(&mut params, "audio_proj", config.d_enc, config.d_model, &mut rng);
        let embed = params.add(
            "decoder.embed.weight",
            normal(&mut rng, vec![config.vocab_size, config.d_model], 1.0).with_grad(),
        );
        let layers = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("decoder.layers.{i}"),
                    config.d_model,
                    config.heads,
                    config.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let classifier = Linear::new(
            &mut params,
            "classifier",
            config.d_model,
            config.vocab_size,
            &mut rng,
        );
        let ser_proj = Linear::new(&mut params, "ser_proj", config.d_model, config.d_sent, &mut rng);
        Ok(Self {
            config,
            params,
            proj,
            embed,
            layers,
            classifier,
            ser_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Per-frame linear projection `T×d_enc → T×d_model`.
    pub fn encode_project(&self, tape: &mut Tape, p: &[Var], features: &AudioFeatures) -> Result<Var> {
        if features.dim() != self.config.d_enc {
            return Err(Error::dim(format!(
                "feature dim {} but model expects d_enc = {}",
                features.dim(),
                self.config.d_enc
            )));
        }
        let x = tape.frozen(features.tensor());
        self.proj.forward(tape, p, x)
    }

    /// Runs the decoder over `prev_tokens` (starting with `BOS`) attending to
    /// `memory`, returning states and logits for every position.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &[Var],
        memory: Var,
        prev_tokens: &[TokenId],
        drop: &mut DropoutCtx,
    ) -> Result<DecoderOutput> {
        if prev_tokens.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must start with bos".into()));
        }
        if prev_tokens.len() > self.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input of {} tokens exceeds max_len + 1 = {}",
                prev_tokens.len(),
                self.config.max_len + 1
            )));
        }
        let len = prev_tokens.len();
        let d = self.config.d_model;
        let x = tape.embedding(p[self.embed], prev_tokens)?;
        let x = tape.add_const(x, &sinusoidal_positions(len, d))?;
        let mut x = drop.apply(tape, x)?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x, memory, drop)?;
        }
        let logits = self.classifier.forward(tape, p, x)?;
        Ok(DecoderOutput {
            token_embeddings: x,
            logits,
        })
    }

    /// Per-position projection `L×d_model → L×d_sent` feeding the sentence encoder body.
    pub fn ser_project(&self, tape: &mut Tape, p: &[Var], token_embeddings: Var) -> Result<Var> {
        self.ser_proj.forward(tape, p, token_embeddings)
    }

    /// Evaluation-mode memory for one clip.
    pub fn project_memory(&self, features: &AudioFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let m = self.encode_project(&mut tape, &p, features)?;
        Ok(tape.to_tensor(m))
    }

    pub fn session(&self) -> InferenceSession<'_> {
        InferenceSession::new(self)
    }

    /// Next-token logits after `prefix`, evaluation mode.
    pub fn step_logits(&self, memory: &Tensor, prefix: &TokenSequence) -> Result<Vec<f64>> {
        let mut s = self.session();
        s.set_memory(memory)?;
        s.step_logits(prefix.ids())
    }
}

/// Keys and values of every decoder layer for one decoded prefix.
#[derive(Debug)]
struct PrefixState {
    /// Per layer, row-major `[len × d_model]`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Evaluation-mode forward passes that share one binding of the parameters.
///
/// `step_logits` decodes incrementally, caching per-prefix keys and values
/// so a beam step costs one row per layer; the result is bitwise equal to
/// the last row of `logits`.
pub struct InferenceSession<'m> {
    model: &'m Captioner,
    tape: Tape,
    params: Vec<Var>,
    memory: Option<Var>,
    memory_kv: Vec<(Var, Var)>,
    base: usize,
    cache: HashMap<Vec<TokenId>, Rc<PrefixState>>,
}

impl<'m> InferenceSession<'m> {
    fn new(model: &'m Captioner) -> Self {
        let mut tape = Tape::new();
        let params = model.params.bind_frozen(&mut tape);
        let base = tape.len();
        Self {
            model,
            tape,
            params,
            memory: None,
            memory_kv: Vec::new(),
            base,
            cache: HashMap::new(),
        }
    }

    pub fn model(&self) -> &Captioner {
        self.model
    }

    pub fn set_memory(&mut self, memory: &Tensor) -> Result<()> {
        match memory.shape() {
            [_, d] if *d == self.model.config.d_model => {}
            other => {
                return Err(Error::dim(format!(
                    "memory must be T×{}, got {other:?}",
                    self.model.config.d_model
                )))
            }
        }
        self.tape.truncate(self.params.len());
        let m = self.tape.frozen(memory);
        self.install_memory(m)
    }

    pub fn set_features(&mut self, features: &AudioFeatures) -> Result<()> {
        self.tape.truncate(self.params.len());
        let m = self.model.encode_project(&mut self.tape, &self.params, features)?;
        self.install_memory(m)
    }

    fn install_memory(&mut self, m: Var) -> Result<()> {
        self.memory = Some(m);
        self.cache.clear();
        self.memory_kv = self
            .model
            .layers
            .iter()
            .map(|l| l.memory_kv(&mut self.tape, &self.params, m))
            .collect::<Result<_>>()?;
        self.base = self.tape.len();
        Ok(())
    }

    fn memory(&self) -> Result<Var> {
        self.memory
            .ok_or_else(|| Error::Contract("inference session has no memory".into()))
    }

    /// Logits `[L × V]` for every position of `prev_tokens`.
    pub fn logits(&mut self, prev_tokens: &[TokenId]) -> Result<Tensor> {
        let memory = self.memory()?;
        self.tape.truncate(self.base);
        let out = self.model.decode_teacher_forced(
            &mut self.tape,
            &self.params,
            memory,
            prev_tokens,
            &mut DropoutCtx::eval(),
        )?;
        Ok(self.tape.to_tensor(out.logits))
    }

    /// Next-token logits after `prefix` (which starts with `BOS`).
    pub fn step_logits(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.memory()?;
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must start with bos".into()));
        }
        if prefix.len() > self.model.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input of {} tokens exceeds max_len + 1 = {}",
                prefix.len(),
                self.model.config.max_len + 1
            )));
        }
        let mut start = prefix.len() - 1;
        while start > 0 && !self.cache.contains_key(&prefix[..start]) {
            start -= 1;
        }
        let mut logits = Vec::new();
        for end in start + 1..=prefix.len() {
            logits = self.extend(&prefix[..end])?;
        }
        Ok(logits)
    }

    /// Runs the last token of `prefix` given the cached state of its parent.
    fn extend(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let n = prefix.len();
        let d = self.model.config.d_model;
        let parent = if n > 1 { self.cache.get(&prefix[..n - 1]).cloned() } else { None };
        self.tape.truncate(self.base);
        let tape = &mut self.tape;
        let p = &self.params;
        let x = tape.embedding(p[self.model.embed], &prefix[n - 1..])?;
        let pos = sinusoidal_positions(n, d);
        let mut x = tape.add_const(x, &pos[(n - 1) * d..])?;
        let mut keys = Vec::with_capacity(self.model.layers.len());
        let mut values = Vec::with_capacity(self.model.layers.len());
        for (i, layer) in self.model.layers.iter().enumerate() {
            let (k, v) = layer.self_kv(tape, p, x)?;
            let mut ks = parent.as_ref().map_or_else(Vec::new, |s| s.keys[i].clone());
            let mut vs = parent.as_ref().map_or_else(Vec::new, |s| s.values[i].clone());
            ks.extend_from_slice(tape.value(k));
            vs.extend_from_slice(tape.value(v));
            let kk = tape.constant(vec![n, d], ks.clone())?;
            let vv = tape.constant(vec![n, d], vs.clone())?;
            x = layer.step(tape, p, x, (kk, vv), self.memory_kv[i])?;
            keys.push(ks);
            values.push(vs);
        }
        let logits = self.model.classifier.forward(tape, p, x)?;
        let out = tape.value(logits).to_vec();
        self.cache.insert(prefix.to_vec(), Rc::new(PrefixState { keys, values }));
        Ok(out)
    }
}
