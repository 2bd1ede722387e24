//! AdamW with decoupled decay, the per-epoch cosine schedule and global-norm clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            clip_norm: 10.0,
            epochs: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be > 0", self.lr0));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} {b} not in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be > 0", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// `½(1 + cos(kπ/K))·lr0`.
pub fn cosine_lr(k: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || k > total {
        return Err(Error::Contract(format!("epoch {k} outside [0, {total}]")));
    }
    // cos(πk/K) written as -sin(π(2k-K)/2K): the integer numerator makes the
    // midpoint exactly zero, and sin is flat at both ends, so lr0, lr0/2 and 0
    // come out exact
    let centred = (2 * k as i64 - total as i64) as f64 * PI / (2 * total) as f64;
    Ok(0.5 * (1.0 - centred.sin()) * lr0)
}

/// Biases are exempt from weight decay. Layer-norm shifts are named `*.bias` too.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Global L2 norm over all gradients of trainable parameters.
pub fn global_grad_norm(params: &ParamStore) -> Result<f64> {
    let mut sq = 0.0;
    for p in params.iter().filter(|p| p.tensor.requires_grad()) {
        if let Some(g) = p.tensor.grad() {
            for x in g {
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
                sq += x * x;
            }
        }
    }
    Ok(sq.sqrt())
}

/// Rescales every gradient so the global norm is at most `clip_norm`.
/// Returns the factor applied.
pub fn clip_global_norm(params: &mut ParamStore, clip_norm: f64) -> Result<f64> {
    let g = global_grad_norm(params)?;
    if g <= clip_norm {
        return Ok(1.0);
    }
    let s = clip_norm / g;
    for p in params.iter_mut() {
        if let Some(grad) = p.tensor.grad_mut() {
            grad.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(s)
}

/// Clipping on a bare gradient list, for callers outside a [`ParamStore`].
pub fn clip_slices(grads: &mut [Vec<f64>], clip_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for x in grads.iter().flatten() {
        if !x.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        sq += x * x;
    }
    let g = sq.sqrt();
    if g <= clip_norm {
        return Ok(1.0);
    }
    let s = clip_norm / g;
    grads.iter_mut().flatten().for_each(|x| *x *= s);
    Ok(s)
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::dim("optimizer state does not match parameters"));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(Error::dim(format!("optimizer state shape for {}", p.name)));
            }
        }
        Ok(())
    }
}

/// One AdamW update on every trainable parameter that holds a gradient.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let decay = if is_decay_exempt(&p.name) { 0.0 } else { cfg.weight_decay };
        let grad = match p.tensor.grad() {
            Some(g) => g.to_vec(),
            None => continue,
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            // decoupled decay first, as a pure contraction, then the Adam step
            *theta = *theta * (1.0 - lr * decay) - lr * (mh / (vh.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
