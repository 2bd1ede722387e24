//! Finite-difference checks of every tape primitive and of the full
//! training loss (decoder, token head and sentence-embedding head) with
//! respect to each trainable parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::params::normal;
use crate::model::{AudioFeatures, Captioner, DropoutCtx, ModelConfig, SentenceEncoder};
use crate::objectives::{combined_loss, cross_entropy_smoothed, ser_loss, LossConfig};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::text::{Vocabulary, BOS, EOS};

pub const DEFAULT_RTOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub rtol: f64,
    pub seeds: usize,
    pub entries: Vec<GradCheckEntry>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    normal(rng, shape, 1.0)
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let c = tape.frozen(w);
    let m = tape.mul(y, c)?;
    Ok(tape.sum(m))
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Builds one primitive case: the point to differentiate at and the scalar
/// function of it. Shapes are drawn from `rng` too.
fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Tensor, Case)> {
    let r = rng.random_range(1..4usize);
    let c = rng.random_range(2..5usize);
    let k = rng.random_range(1..4usize);
    let x = randn(rng, vec![r, c]);
    let w = randn(rng, vec![r, c]);
    Ok(match name {
        "matmul_lhs" | "matmul_rhs" => {
            let a = randn(rng, vec![r, c]);
            let b = randn(rng, vec![c, k]);
            let w = randn(rng, vec![r, k]);
            if name == "matmul_lhs" {
                (a, Box::new(move |t, x| {
                    let b = t.frozen(&b);
                    let y = t.matmul(x, b)?;
                    probe(t, y, &w)
                }))
            } else {
                (b, Box::new(move |t, x| {
                    let a = t.frozen(&a);
                    let y = t.matmul(a, x)?;
                    probe(t, y, &w)
                }))
            }
        }
        "transpose" => {
            let w = randn(rng, vec![c, r]);
            (x, Box::new(move |t, x| {
                let y = t.transpose(x)?;
                probe(t, y, &w)
            }))
        }
        "add" | "sub" | "mul" => {
            let other = randn(rng, vec![r, c]);
            let op = name.to_string();
            (x, Box::new(move |t, x| {
                let o = t.frozen(&other);
                let y = match op.as_str() {
                    "add" => t.add(o, x)?,
                    "sub" => t.sub(o, x)?,
                    _ => t.mul(o, x)?,
                };
                probe(t, y, &w)
            }))
        }
        "add_row_input" | "add_row_bias" => {
            let bias = randn(rng, vec![1, c]);
            if name == "add_row_input" {
                (x, Box::new(move |t, x| {
                    let b = t.frozen(&bias);
                    let y = t.add_row(x, b)?;
                    probe(t, y, &w)
                }))
            } else {
                (bias, Box::new(move |t, b| {
                    let x = t.frozen(&x);
                    let y = t.add_row(x, b)?;
                    probe(t, y, &w)
                }))
            }
        }
        "scale" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            (x, Box::new(move |t, x| {
                let y = t.scale(x, s);
                probe(t, y, &w)
            }))
        }
        "add_const" => {
            let cst = randn(rng, vec![r, c]);
            (x, Box::new(move |t, x| {
                let y = t.add_const(x, cst.data())?;
                probe(t, y, &w)
            }))
        }
        "reshape" => {
            let w = randn(rng, vec![r * c]);
            (x, Box::new(move |t, x| {
                let n = t.value(x).len();
                let y = t.reshape(x, vec![n])?;
                probe(t, y, &w)
            }))
        }
        "gelu" => (x, Box::new(move |t, x| {
            let y = t.gelu(x);
            probe(t, y, &w)
        })),
        "softmax_rows" | "softmax_cols" => {
            let axis = usize::from(name == "softmax_rows");
            (x, Box::new(move |t, x| {
                let y = t.softmax(x, axis)?;
                probe(t, y, &w)
            }))
        }
        "layer_norm_input" | "layer_norm_gain" | "layer_norm_shift" => {
            let g = randn(rng, vec![1, c]);
            let b = randn(rng, vec![1, c]);
            let which = name.to_string();
            let point = match name {
                "layer_norm_input" => x.clone(),
                "layer_norm_gain" => g.clone(),
                _ => b.clone(),
            };
            (point, Box::new(move |t, p| {
                let (xv, gv, bv) = match which.as_str() {
                    "layer_norm_input" => (p, t.frozen(&g), t.frozen(&b)),
                    "layer_norm_gain" => (t.frozen(&x), p, t.frozen(&b)),
                    _ => (t.frozen(&x), t.frozen(&g), p),
                };
                let y = t.layer_norm(xv, gv, bv, 1e-5)?;
                probe(t, y, &w)
            }))
        }
        "embedding" => {
            let vocab = r + 2;
            let table = randn(rng, vec![vocab, c]);
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..vocab)).collect();
            let w = randn(rng, vec![ids.len(), c]);
            (table, Box::new(move |t, x| {
                let y = t.embedding(x, &ids)?;
                probe(t, y, &w)
            }))
        }
        "dropout" => {
            let seed: u64 = rng.random();
            (x, Box::new(move |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let y = t.dropout(x, 0.3, true, &mut rng)?;
                probe(t, y, &w)
            }))
        }
        "slice_cols" => {
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            let w = randn(rng, vec![r, len]);
            (x, Box::new(move |t, x| {
                let y = t.slice_cols(x, start, len)?;
                probe(t, y, &w)
            }))
        }
        "concat_cols" => {
            let other = randn(rng, vec![r, k]);
            let w = randn(rng, vec![r, c + 2 * k]);
            (x, Box::new(move |t, x| {
                let o = t.frozen(&other);
                let y = t.concat_cols(&[o, x, o])?;
                probe(t, y, &w)
            }))
        }
        "mean_rows" => {
            let w = randn(rng, vec![1, c]);
            (x, Box::new(move |t, x| {
                let y = t.mean_rows(x)?;
                probe(t, y, &w)
            }))
        }
        "sum" => (x, Box::new(move |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        })),
        "mean" => (x, Box::new(move |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        })),
        "cross_entropy" => {
            let targets: Vec<Option<usize>> = (0..r)
                .map(|i| (i != 1).then(|| rng.random_range(0..c)))
                .collect();
            let norm = rng.random_range(1.0..4.0);
            (x, Box::new(move |t, x| t.cross_entropy(x, &targets, 0.1, norm)))
        }
        "smooth_l1" | "mse" | "l1" | "cosine_distance" => {
            // keep |pred - ref| away from the kinks at 0 and beta
            let reference = randn(rng, vec![r, c]);
            let mut pred = reference.clone();
            for v in pred.data_mut() {
                let d: f64 = rng.random_range(0.1..0.9) + if rng.random() { 1.0 } else { 0.0 };
                *v += if rng.random() { d } else { -d };
            }
            let op = name.to_string();
            (pred, Box::new(move |t, x| {
                let rv = t.frozen(&reference);
                match op.as_str() {
                    "smooth_l1" => t.smooth_l1(x, rv, 1.0),
                    "mse" => t.mse(x, rv),
                    "l1" => t.l1(x, rv),
                    _ => t.cosine_distance(x, rv),
                }
            }))
        }
        other => unreachable!("unknown primitive case {other}"),
    })
}

pub const PRIMITIVES: [&str; 33] = [
    "matmul_lhs",
    "matmul_rhs",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row_input",
    "add_row_bias",
    "scale",
    "add_const",
    "reshape",
    "gelu",
    "softmax_rows",
    "softmax_cols",
    "layer_norm_input",
    "layer_norm_gain",
    "layer_norm_shift",
    "embedding",
    "dropout",
    "slice_cols",
    "concat_cols",
    "mean_rows",
    "sum",
    "mean",
    "cross_entropy",
    "smooth_l1",
    "mse",
    "l1",
    "cosine_distance",
    // composite building blocks exercised through the layers
    "attention",
    "feed_forward",
    "decoder_layer",
    "encoder_layer",
];

fn block_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Tensor, Case)> {
    use crate::model::layers::{DecoderLayer, EncoderLayer, FeedForward, MultiHeadAttention};
    use crate::model::ParamStore;
    let d = 4;
    let rows = rng.random_range(2..5usize);
    let mem_rows = rng.random_range(1..4usize);
    let mut store = ParamStore::new();
    let x = randn(rng, vec![rows, d]);
    let memory = randn(rng, vec![mem_rows, d]);
    let w = randn(rng, vec![rows, d]);
    let case: Case = match name {
        "attention" => {
            let m = MultiHeadAttention::new(&mut store, "a", d, 2, rng);
            Box::new(move |t, x| {
                let p = store.bind_frozen(t);
                let y = m.forward(t, &p, x, x, true)?;
                probe(t, y, &w)
            })
        }
        "feed_forward" => {
            let f = FeedForward::new(&mut store, "f", d, 8, rng);
            Box::new(move |t, x| {
                let p = store.bind_frozen(t);
                let y = f.forward(t, &p, x, &mut DropoutCtx::eval())?;
                probe(t, y, &w)
            })
        }
        "decoder_layer" => {
            let l = DecoderLayer::new(&mut store, "d", d, 2, 8, rng);
            Box::new(move |t, x| {
                let p = store.bind_frozen(t);
                let mem = t.frozen(&memory);
                let y = l.forward(t, &p, x, mem, &mut DropoutCtx::eval())?;
                probe(t, y, &w)
            })
        }
        _ => {
            let l = EncoderLayer::new(&mut store, "e", d, 2, 8, rng);
            Box::new(move |t, x| {
                let p = store.bind_frozen(t);
                let y = l.forward(t, &p, x)?;
                probe(t, y, &w)
            })
        }
    };
    Ok((x, case))
}

/// Checks every primitive at `seeds` random points each.
pub fn primitive_suite(seeds: usize, rtol: f64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for name in PRIMITIVES {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::util::fnv1a64(name.as_bytes()));
            let (point, f) = match name {
                "attention" | "feed_forward" | "decoder_layer" | "encoder_layer" => block_case(name, &mut rng)?,
                _ => primitive_case(name, &mut rng)?,
            };
            let rep = grad_check(f, &point, FD_STEP, rtol)?;
            coords += point.numel();
            worst = worst.max(rep.max_rel_error);
        }
        out.push(GradCheckEntry {
            name: name.to_string(),
            seeds,
            coordinates: coords,
            max_rel_error: worst,
            passed: worst < rtol,
        });
    }
    Ok(out)
}

/// Micro-scale model used for the composite check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        decoder_layers: 2,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.2,
        d_enc: 6,
        d_sent: 8,
        max_len: 8,
        vocab_size: 0,
        sent_layers: 1,
        sent_heads: 2,
        sent_ffn_dim: 16,
    }
}

/// Gradient of the combined training loss with respect to every trainable
/// parameter of a micro captioner, dropout active with a fixed mask.
pub fn composite_suite(seeds: usize, rtol: f64) -> Result<Vec<GradCheckEntry>> {
    let vocab = Vocabulary::word(&["a dog barks", "a man speaks loudly"], 1)?;
    let mut cfg = micro_config();
    cfg.vocab_size = vocab.len();
    let sentence = SentenceEncoder::new(vocab.clone(), cfg.d_sent, cfg.sent_layers, cfg.sent_heads, cfg.sent_ffn_dim)?;
    let loss_cfg = LossConfig {
        lambda: 1.0,
        ..LossConfig::default()
    };
    let n_params = Captioner::new(cfg.clone(), 0)?.params().len();
    let mut worst = vec![0.0f64; n_params];
    let mut coords = vec![0usize; n_params];
    let mut names = vec![String::new(); n_params];
    for seed in 0..seeds as u64 {
        let model = Captioner::new(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = AudioFeatures::new(randn(&mut rng, vec![5, cfg.d_enc]))?;
        let caption = if seed % 2 == 0 { "a dog barks" } else { "a man speaks loudly" };
        let body = vocab.encode(caption).body().to_vec();
        let mut inputs = vec![BOS];
        inputs.extend(&body);
        let mut targets = body.clone();
        targets.push(EOS);
        let reference = sentence.embed_text(caption)?;
        let reference = Tensor::new(vec![1, reference.dim()], reference.as_slice().to_vec())?;
        for (i, param) in model.params().iter().enumerate() {
            if !param.tensor.requires_grad() {
                continue;
            }
            names[i] = param.name.clone();
            let (model, sentence, loss_cfg) = (&model, &sentence, &loss_cfg);
            let (feats, inputs, targets, reference) = (&feats, &inputs, &targets, &reference);
            let f = move |t: &mut Tape, x: Var| -> Result<Var> {
                let mut p = model.params().bind_frozen(t);
                p[i] = x;
                let sp = sentence.bind(t);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
                let mut drop = DropoutCtx::train(model.config().dropout, &mut drop_rng);
                let mem = model.encode_project(t, &p, feats)?;
                let out = model.decode_teacher_forced(t, &p, mem, inputs, &mut drop)?;
                let ce = cross_entropy_smoothed(t, out.logits, targets, loss_cfg.label_smoothing)?;
                let proj = model.ser_project(t, &p, out.token_embeddings)?;
                let pred = sentence.body(t, &sp, proj)?;
                let r = t.frozen(reference);
                let ls = ser_loss(t, pred, r, loss_cfg)?;
                combined_loss(t, ce, Some(ls), loss_cfg.lambda)
            };
            let rep = grad_check(f, &param.tensor, FD_STEP, rtol)?;
            worst[i] = worst[i].max(rep.max_rel_error);
            coords[i] += param.tensor.numel();
        }
    }
    Ok(names
        .into_iter()
        .zip(worst.into_iter().zip(coords))
        .filter(|(n, _)| !n.is_empty())
        .map(|(n, (w, c))| GradCheckEntry {
            name: format!("composite:{n}"),
            seeds,
            coordinates: c,
            max_rel_error: w,
            passed: w < rtol,
        })
        .collect())
}

pub fn run_suite(seeds: usize, rtol: f64) -> Result<GradSuiteReport> {
    let mut entries = primitive_suite(seeds, rtol)?;
    entries.extend(composite_suite(seeds, rtol)?);
    Ok(GradSuiteReport { rtol, seeds, entries })
}
