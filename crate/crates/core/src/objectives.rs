//! Token cross-entropy, the sentence-embedding regression criteria and their
//! weighted sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SentenceEmbedding;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{TokenId, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerKind {
    SmoothL1,
    Mse,
    L1,
    Cosine,
}

impl fmt::Display for SerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SerKind::SmoothL1 => "smooth_l1",
            SerKind::Mse => "mse",
            SerKind::L1 => "l1",
            SerKind::Cosine => "cosine",
        })
    }
}

impl FromStr for SerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_l1" => Ok(SerKind::SmoothL1),
            "mse" => Ok(SerKind::Mse),
            "l1" => Ok(SerKind::L1),
            "cosine" => Ok(SerKind::Cosine),
            other => Err(Error::config(format!("unknown SER criterion {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub lambda: f64,
    pub beta: f64,
    pub ser_kind: SerKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            lambda: 100.0,
            beta: 1.0,
            ser_kind: SerKind::SmoothL1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta {} must be > 0", self.beta)));
        }
        Ok(())
    }
}

/// `PAD` targets become masked rows.
pub fn target_mask(targets: &[TokenId]) -> Vec<Option<usize>> {
    targets.iter().map(|&t| (t != PAD).then_some(t)).collect()
}

/// Label-smoothed CE averaged over the non-pad rows of `logits` (`L × V`).
pub fn cross_entropy_smoothed(
    tape: &mut Tape,
    logits: Var,
    targets: &[TokenId],
    smoothing: f64,
) -> Result<Var> {
    let mask = target_mask(targets);
    let n = mask.iter().flatten().count();
    if n == 0 {
        return Err(Error::Contract("cross-entropy over an all-pad target".into()));
    }
    tape.cross_entropy(logits, &mask, smoothing, n as f64)
}

/// Summed CE over the non-pad rows divided by `norm`; lets a batch of
/// sequences share one token-count normaliser.
pub fn cross_entropy_sum(
    tape: &mut Tape,
    logits: Var,
    targets: &[TokenId],
    smoothing: f64,
    norm: f64,
) -> Result<Var> {
    tape.cross_entropy(logits, &target_mask(targets), smoothing, norm)
}

/// Mean SmoothL1 between predicted and reference sentence embeddings.
pub fn smooth_l1(tape: &mut Tape, pred: Var, reference: Var, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("smooth_l1 beta {beta} must be > 0")));
    }
    tape.smooth_l1(pred, reference, beta)
}

/// Dispatches to the configured regression criterion.
pub fn ser_loss(tape: &mut Tape, pred: Var, reference: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.ser_kind {
        SerKind::SmoothL1 => smooth_l1(tape, pred, reference, cfg.beta),
        other => ser_alternative(tape, pred, reference, other),
    }
}

pub fn ser_alternative(tape: &mut Tape, pred: Var, reference: Var, kind: SerKind) -> Result<Var> {
    match kind {
        SerKind::Mse => tape.mse(pred, reference),
        SerKind::L1 => tape.l1(pred, reference),
        SerKind::Cosine => tape.cosine_distance(pred, reference),
        SerKind::SmoothL1 => Err(Error::Contract(
            "smooth_l1 is the primary criterion, not an alternative".into(),
        )),
    }
}

/// `L_t + λ·L_s`. With `λ = 0` the token loss is returned unchanged.
pub fn combined_loss(tape: &mut Tape, token_loss: Var, ser: Option<Var>, lambda: f64) -> Result<Var> {
    match ser {
        Some(ls) if lambda != 0.0 => {
            let w = tape.scale(ls, lambda);
            tape.add(token_loss, w)
        }
        _ => Ok(token_loss),
    }
}

/// Evaluates a criterion on two embeddings outside any training tape.
pub fn ser_value(a: &SentenceEmbedding, b: &SentenceEmbedding, kind: SerKind, beta: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("embedding dims {} vs {}", a.dim(), b.dim())));
    }
    let mut tape = Tape::new();
    let x = tape.frozen(&Tensor::new(vec![a.dim()], a.as_slice().to_vec())?);
    let y = tape.frozen(&Tensor::new(vec![b.dim()], b.as_slice().to_vec())?);
    let cfg = LossConfig {
        beta,
        ser_kind: kind,
        ..LossConfig::default()
    };
    let l = ser_loss(&mut tape, x, y, &cfg)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn scalar_pair(tape: &mut Tape, a: &[f64], b: &[f64]) -> (Var, Var) {
        let x = tape.leaf(&Tensor::new(vec![a.len()], a.to_vec()).unwrap().with_grad());
        let y = tape.frozen(&Tensor::new(vec![b.len()], b.to_vec()).unwrap());
        (x, y)
    }

    fn eval(kind: SerKind, a: &[f64], b: &[f64], beta: f64) -> f64 {
        let mut tape = Tape::new();
        let (x, y) = scalar_pair(&mut tape, a, b);
        let cfg = LossConfig {
            beta,
            ser_kind: kind,
            ..LossConfig::default()
        };
        let l = ser_loss(&mut tape, x, y, &cfg).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn uniform_logits_give_ln_v_for_any_smoothing() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::new();
            let z = tape.constant(vec![3, 7], vec![0.3; 21]).unwrap();
            let l = cross_entropy_smoothed(&mut tape, z, &[4, PAD, 6], eps).unwrap();
            assert!((tape.scalar(l) - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_prediction_goes_to_zero_without_smoothing() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        let l = cross_entropy_smoothed(&mut tape, z, &[1], 0.0).unwrap();
        assert!(tape.scalar(l) < 1e-20);
    }

    #[test]
    fn two_class_hand_value() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let l = cross_entropy_smoothed(&mut tape, z, &[1], 0.1).unwrap();
        let expected = -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln());
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((tape.scalar(l) - 0.3426).abs() < 5e-5);
    }

    #[test]
    fn all_pad_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        assert!(cross_entropy_smoothed(&mut tape, z, &[PAD, PAD], 0.1).is_err());
    }

    #[test]
    fn pad_rows_do_not_contribute() {
        let data: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut t1 = Tape::new();
        let z = t1.constant(vec![2, 5], data.clone()).unwrap();
        let a = cross_entropy_smoothed(&mut t1, z, &[3, PAD], 0.1).unwrap();
        let mut t2 = Tape::new();
        let z = t2.constant(vec![1, 5], data[..5].to_vec()).unwrap();
        let b = cross_entropy_smoothed(&mut t2, z, &[3], 0.1).unwrap();
        assert_eq!(t1.scalar(a), t2.scalar(b));
    }

    #[test]
    fn smooth_l1_hand_values() {
        assert_eq!(eval(SerKind::SmoothL1, &[0.5], &[0.0], 1.0), 0.125);
        assert_eq!(eval(SerKind::SmoothL1, &[2.0], &[0.0], 1.0), 1.5);
        assert_eq!(eval(SerKind::SmoothL1, &[0.3, -1.2], &[0.3, -1.2], 1.0), 0.0);
    }

    #[test]
    fn alternatives_hand_values() {
        assert_eq!(eval(SerKind::Mse, &[2.0], &[0.0], 1.0), 4.0);
        assert_eq!(eval(SerKind::L1, &[2.0], &[0.0], 1.0), 2.0);
        assert!((eval(SerKind::Cosine, &[1.0, 2.0], &[-2.0, -4.0], 1.0) - 2.0).abs() < 1e-15);
        for k in [SerKind::Mse, SerKind::L1, SerKind::Cosine] {
            assert!(eval(k, &[0.4, 0.1], &[0.4, 0.1], 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_zero_norm_rejected() {
        let mut tape = Tape::new();
        let (x, y) = scalar_pair(&mut tape, &[0.0, 0.0], &[1.0, 0.0]);
        assert!(ser_alternative(&mut tape, x, y, SerKind::Cosine).is_err());
    }

    #[test]
    fn smooth_l1_continuous_at_beta() {
        for beta in [0.5, 1.0, 2.0] {
            let lo = beta - 1e-9;
            let hi = beta + 1e-9;
            let f = |d: f64| eval(SerKind::SmoothL1, &[d], &[0.0], beta);
            assert!((f(lo) - f(hi)).abs() < 1e-8);
            let grad = |d: f64| {
                let mut tape = Tape::new();
                let (x, y) = scalar_pair(&mut tape, &[d], &[0.0]);
                let l = smooth_l1(&mut tape, x, y, beta).unwrap();
                tape.backward(l).unwrap();
                tape.grad(x).unwrap()[0]
            };
            assert!((grad(lo) - grad(hi)).abs() < 1e-8);
        }
    }

    #[test]
    fn combined_loss_arithmetic_and_lambda_zero() {
        let mut tape = Tape::new();
        let lt = tape.constant(vec![], vec![0.5]).unwrap();
        let ls = tape.constant(vec![], vec![0.01]).unwrap();
        let l = combined_loss(&mut tape, lt, Some(ls), 100.0).unwrap();
        assert!((tape.scalar(l) - 1.5).abs() < 1e-15);
        let l0 = combined_loss(&mut tape, lt, Some(ls), 0.0).unwrap();
        assert_eq!(l0, lt);
        assert_eq!(LossConfig::default().lambda, 100.0);
    }

    #[test]
    fn combined_gradient_is_linear() {
        let a = Tensor::from_fn(vec![1, 4], |i| i as f64 * 0.3 - 0.4).with_grad();
        let target = Tensor::from_fn(vec![1, 4], |i| (i as f64).cos());
        let run = |lambda: f64, which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(&a);
            let t = tape.frozen(&target);
            let lt = cross_entropy_smoothed(&mut tape, x, &[2], 0.1).unwrap();
            let ls = smooth_l1(&mut tape, x, t, 1.0).unwrap();
            let l = match which {
                0 => combined_loss(&mut tape, lt, Some(ls), lambda).unwrap(),
                1 => lt,
                _ => ls,
            };
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let g = run(100.0, 0);
        let gt = run(0.0, 1);
        let gs = run(0.0, 2);
        for i in 0..4 {
            assert!((g[i] - (gt[i] + 100.0 * gs[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_ce_grad_check() {
        let point = Tensor::from_fn(vec![3, 5], |i| (i as f64 * 1.3).sin());
        let r = grad_check(
            |tape, x| cross_entropy_smoothed(tape, x, &[1, PAD, 4], 0.1),
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = |f: fn(&mut LossConfig)| {
            let mut c = LossConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.label_smoothing = 1.0));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.beta = 0.0));
        assert_eq!("cosine".parse::<SerKind>().unwrap(), SerKind::Cosine);
        assert_eq!(SerKind::SmoothL1.to_string(), "smooth_l1");
    }

    proptest! {
        #[test]
        fn smooth_l1_nonnegative_and_zero_iff_equal(
            a in prop::collection::vec(-5.0f64..5.0, 1..8),
            shift in prop::collection::vec(-3.0f64..3.0, 8),
            beta in 0.1f64..3.0,
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let v = eval(SerKind::SmoothL1, &a, &b, beta);
            prop_assert!(v >= 0.0);
            let same = a.iter().zip(&b).all(|(x, y)| x == y);
            prop_assert_eq!(v == 0.0, same);
        }
    }
}
