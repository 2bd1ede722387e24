//! Transformer building blocks. Each block stores indices into a
//! [`ParamStore`] and runs against the `Var`s that store was bound to.

use rand::{Rng, RngCore};

use super::params::{xavier_uniform, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Dropout source for one forward pass; `None` means evaluation mode.
pub struct DropoutCtx<'r> {
    p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> DropoutCtx<'r> {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, self.p, true, rng),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out).with_grad());
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]).with_grad());
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w])?;
        tape.add_row(h, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![d], vec![1.0; d]).expect("shape").with_grad(),
        );
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]).with_grad());
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Additive mask with `-inf` strictly above the diagonal.
pub fn causal_mask(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    /// Scaled dot-product attention of `query` rows over `context` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        query: Var,
        context: Var,
        causal: bool,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(tape, p, context)?;
        let lq = tape.shape(query)[0];
        let mask = causal.then(|| causal_mask(lq));
        self.attend(tape, p, query, k, v, mask.as_deref())
    }

    /// Key and value projections of `context`.
    pub fn project_kv(&self, tape: &mut Tape, p: &[Var], context: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(tape, p, context)?, self.v.forward(tape, p, context)?))
    }

    /// Attention of `query` over already projected keys and values.
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &[Var],
        query: Var,
        k: Var,
        v: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, query)?;
        let d = tape.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add_const(s, m)?;
            }
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.out.forward(tape, p, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, drop: &mut DropoutCtx) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = drop.apply(tape, h)?;
        self.down.forward(tape, p, h)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention, GELU FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng),
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ln3: LayerNorm::new(store, &format!("{name}.norm3"), d),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        memory: Var,
        drop: &mut DropoutCtx,
    ) -> Result<Var> {
        let sa = self.self_attn.forward(tape, p, x, x, true)?;
        let sa = drop.apply(tape, sa)?;
        let x = tape.add(x, sa)?;
        let x = self.ln1.forward(tape, p, x)?;

        let ca = self.cross_attn.forward(tape, p, x, memory, false)?;
        let ca = drop.apply(tape, ca)?;
        let x = tape.add(x, ca)?;
        let x = self.ln2.forward(tape, p, x)?;

        let ff = self.ffn.forward(tape, p, x, drop)?;
        let ff = drop.apply(tape, ff)?;
        let x = tape.add(x, ff)?;
        self.ln3.forward(tape, p, x)
    }

    /// Evaluation-mode forward of one new row. `self_kv` holds keys and
    /// values of the new row and every earlier position; `memory_kv` is
    /// the projected memory. Returns the row output.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        self_kv: (Var, Var),
        memory_kv: (Var, Var),
    ) -> Result<Var> {
        let sa = self.self_attn.attend(tape, p, x, self_kv.0, self_kv.1, None)?;
        let x = tape.add(x, sa)?;
        let x = self.ln1.forward(tape, p, x)?;
        let ca = self.cross_attn.attend(tape, p, x, memory_kv.0, memory_kv.1, None)?;
        let x = tape.add(x, ca)?;
        let x = self.ln2.forward(tape, p, x)?;
        let ff = self.ffn.forward(tape, p, x, &mut DropoutCtx::eval())?;
        let x = tape.add(x, ff)?;
        self.ln3.forward(tape, p, x)
    }

    pub fn self_kv(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        self.self_attn.project_kv(tape, p, x)
    }

    pub fn memory_kv(&self, tape: &mut Tape, p: &[Var], memory: Var) -> Result<(Var, Var)> {
        self.cross_attn.project_kv(tape, p, memory)
    }
}

/// Post-norm encoder block (bidirectional self-attention), no dropout.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng),
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let a = self.attn.forward(tape, p, x, x, false)?;
        let x = tape.add(x, a)?;
        let x = self.ln1.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x, &mut DropoutCtx::eval())?;
        let x = tape.add(x, f)?;
        self.ln2.forward(tape, p, x)
    }
}
