use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Reshape(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        norm: f64,
        probs: Vec<f64>,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        beta: f64,
    },
    Mse(Var, Var),
    L1(Var, Var),
    CosineDistance(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations in topological (creation) order.
///
/// A tape is built for one forward pass and can be differentiated once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, re-arming `backward`.
    /// Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(format!("expected a 2-D tensor, got shape {other:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::dim(format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !target.requires_grad() {
            return Ok(());
        }
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// A leaf that never receives gradient, whatever the source tensor's flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.frozen(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{m}x{k}] · [{k2}x{n}]"
            )));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, (av, k, 1), (bv, n, 1), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let av = &self.node(a).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `a[m×n] + bias[n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.node(bias).value.len() != n {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match {n} columns",
                self.shape(bias)
            )));
        }
        let av = &self.node(a).value;
        let bv = &self.node(bias).value;
        let mut out = av.clone();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Adds a constant buffer (e.g. an attention mask); gradient passes straight through.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim(format!(
                "constant of length {} added to shape {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Exact GELU, `x·Φ(x)` with the erf-based Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalises each row of the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(format!(
                "layer_norm affine parameters must have {n} elements"
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / n.max(1);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather `table[ids]`; the backward pass scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "token id {id} out of range for a table of {v} rows"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (same handle) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of {n}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::dim(format!("concat row mismatch {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return Err(Error::dim("mean over zero rows"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// Label-smoothed cross-entropy summed over rows whose target is `Some`,
    /// divided by `norm`.
    ///
    /// The smoothed target is `(1-ε)·onehot + ε/V`, so the target class
    /// receives `1-ε+ε/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
        norm: f64,
    ) -> Result<Var> {
        let (l, v) = self.dims2(logits)?;
        if targets.len() != l {
            return Err(Error::dim(format!(
                "{} targets for {l} logit rows",
                targets.len()
            )));
        }
        if !(norm > 0.0) {
            return Err(Error::Contract(format!("cross-entropy normaliser {norm}")));
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        let off = smoothing / v as f64;
        for (r, t) in targets.iter().enumerate() {
            let row = &xv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Index(format!("target {t} out of {v} classes")));
                }
                let mut loss = 0.0;
                for (c, &x) in row.iter().enumerate() {
                    let q = off + if c == t { 1.0 - smoothing } else { 0.0 };
                    if q != 0.0 {
                        loss -= q * (x - lse);
                    }
                }
                total += loss;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![total / norm],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                norm,
                probs,
            },
            rg,
        ))
    }

    /// Mean SmoothL1: `d²/(2β)` when `|d| < β`, otherwise `|d| − β/2`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| {
                let d = x - y;
                if d.abs() < beta {
                    d * d / (2.0 * beta)
                } else {
                    d.abs() - beta / 2.0
                }
            })
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Vec::new(), vec![s / n], Op::SmoothL1 { a, b, beta }, rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Vec::new(), vec![s / n], Op::Mse(a, b), rg))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Vec::new(), vec![s / n], Op::L1(a, b), rg))
    }

    /// `1 − cos(a, b)`; zero-norm operands are rejected.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Contract(
                "cosine of a zero-norm vector is undefined".into(),
            ));
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Vec::new(),
            vec![1.0 - dot / (na * nb)],
            Op::CosineDistance(a, b),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// `c += a·b` for row-major `c` of shape `[m, n]`; `a` and `b` are given as
/// (data, row stride, column stride) so transposed operands need no copy.
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every index the kernel touches is inside the slices given the
    // strides and shapes checked by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Mutable gradient buffer for `v`, or `None` when `v` does not need one.
fn buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            // dA += G·Bᵀ and dB += Aᵀ·G, transposes taken through strides
            if let Some(da) = buf(nodes, grads, *a) {
                gemm_acc(m, n, k, (g, n, 1), (bv, 1, n), da);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                gemm_acc(k, m, n, (av, 1, k), (g, n, 1), db);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            if let Some(da) = buf(nodes, grads, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = buf(nodes, grads, *v) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = buf(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = buf(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if let Some(d) = buf(nodes, grads, *a) {
                for ((x, y), z) in d.iter_mut().zip(g).zip(bv) {
                    *x += y * z;
                }
            }
            if let Some(d) = buf(nodes, grads, *b) {
                for ((x, y), z) in d.iter_mut().zip(g).zip(av) {
                    *x += y * z;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(d) = buf(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let n = nodes[a.0].shape[1];
            if let Some(d) = buf(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = buf(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(d) = buf(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Gelu(a) => {
            let av = &nodes[a.0].value;
            if let Some(d) = buf(nodes, grads, *a) {
                for ((x, y), &z) in d.iter_mut().zip(g).zip(av) {
                    *x += y * (std_normal_cdf(z) + z * std_normal_pdf(z));
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            if let Some(d) = buf(nodes, grads, *x) {
                for o in 0..*outer {
                    for k in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + k;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = nodes[gamma.0].value.len();
            let gv = &nodes[gamma.0].value;
            if let Some(d) = buf(nodes, grads, *gamma) {
                for (r, row) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        d[j] += row[j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(d) = buf(nodes, grads, *beta) {
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(d) = buf(nodes, grads, *x) {
                for (r, row) in g.chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<f64> = row.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dcols = nodes[table.0].shape[1];
            if let Some(d) = buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in d[id * dcols..(id + 1) * dcols]
                        .iter_mut()
                        .zip(&g[r * dcols..(r + 1) * dcols])
                    {
                        *a += b;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(d) = buf(nodes, grads, *x) {
                for ((a, b), m) in d.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].shape[1];
            let w = node.shape[1];
            if let Some(d) = buf(nodes, grads, *x) {
                for (r, row) in g.chunks(w).enumerate() {
                    for (a, b) in d[r * n + start..r * n + start + w].iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.shape[1];
            let mut off = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(d) = buf(nodes, grads, *p) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for (a, b) in d[r * w..(r + 1) * w].iter_mut().zip(&row[off..off + w]) {
                            *a += b;
                        }
                    }
                }
                off += w;
            }
        }
        Op::MeanRows(x) => {
            let m = nodes[x.0].shape[0];
            if let Some(d) = buf(nodes, grads, *x) {
                for row in d.chunks_mut(g.len()) {
                    for (a, b) in row.iter_mut().zip(g) {
                        *a += b / m as f64;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                d.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = buf(nodes, grads, *x) {
                let n = d.len() as f64;
                d.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            norm,
            probs,
        } => {
            let v = nodes[logits.0].shape[1];
            let off = smoothing / v as f64;
            if let Some(d) = buf(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..v {
                        let q = off + if c == t { 1.0 - smoothing } else { 0.0 };
                        d[r * v + c] += g[0] * (probs[r * v + c] - q) / norm;
                    }
                }
            }
        }
        Op::SmoothL1 { a, b, beta } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let n = av.len() as f64;
            let deriv: Vec<f64> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| {
                    let d = x - y;
                    let s = if d.abs() < *beta { d / beta } else { d.signum() };
                    g[0] * s / n
                })
                .collect();
            apply_pair(nodes, grads, *a, *b, &deriv);
        }
        Op::Mse(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let n = av.len() as f64;
            let deriv: Vec<f64> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| g[0] * 2.0 * (x - y) / n)
                .collect();
            apply_pair(nodes, grads, *a, *b, &deriv);
        }
        Op::L1(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let n = av.len() as f64;
            let deriv: Vec<f64> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| {
                    let d = x - y;
                    let s = if d == 0.0 { 0.0 } else { d.signum() };
                    g[0] * s / n
                })
                .collect();
            apply_pair(nodes, grads, *a, *b, &deriv);
        }
        Op::CosineDistance(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
            // d(1 - cos)/da = -(b/(|a||b|) - cos·a/|a|²)
            let cos = dot / (na * nb);
            if let Some(d) = buf(nodes, grads, *a) {
                for ((x, &ai), &bi) in d.iter_mut().zip(av).zip(bv) {
                    *x -= g[0] * (bi / (na * nb) - cos * ai / (na * na));
                }
            }
            if let Some(d) = buf(nodes, grads, *b) {
                for ((x, &ai), &bi) in d.iter_mut().zip(av).zip(bv) {
                    *x -= g[0] * (ai / (na * nb) - cos * bi / (nb * nb));
                }
            }
        }
    }
}

fn apply_pair(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: Var, b: Var, deriv: &[f64]) {
    if let Some(d) = buf(nodes, grads, a) {
        d.iter_mut().zip(deriv).for_each(|(x, y)| *x += y);
    }
    if let Some(d) = buf(nodes, grads, b) {
        d.iter_mut().zip(deriv).for_each(|(x, y)| *x -= y);
    }
}
