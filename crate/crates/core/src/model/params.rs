use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::Fnv1a;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a tape leaf (trainable ones keep their flag).
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Records every parameter as a non-differentiable leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.frozen(&p.tensor)).collect()
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::dim("binding does not match parameter store"));
        }
        for (p, v) in self.params.iter_mut().zip(bound) {
            tape.accumulate_into(*v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.tensor.requires_grad() {
                p.tensor.zero_grad();
            }
        }
    }

    /// Hash over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Replaces values (not flags) from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::format("parameter count mismatch"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::format(format!(
                    "parameter layout mismatch at {} vs {}",
                    dst.name, src.name
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

pub(crate) fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    Tensor::from_fn(vec![fan_in, fan_out], |_| dist.sample(rng))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| { let z: f64 = StandardNormal.sample(rng); std * z })
}
