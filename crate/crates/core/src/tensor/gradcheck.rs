use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rtol
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.frozen(point);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    Ok(tape.scalar(y))
}

pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut p = point.clone();
    p.set_requires_grad(true);
    let mut tape = Tape::new();
    let x = tape.leaf(&p);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    Ok(tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]))
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient<F>(f: &F, point: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step {eps} must be > 0")));
    }
    let mut p = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let fp = eval_scalar(f, &p)?;
        p.data_mut()[i] = orig - eps;
        let fm = eval_scalar(f, &p)?;
        p.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rtol: f64) -> GradCheckReport {
    let mut worst = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        let err = (a - n).abs() / denom;
        // NaN must surface as a failure
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = i;
        }
    }
    GradCheckReport {
        analytic: analytic.to_vec(),
        numeric: numeric.to_vec(),
        max_rel_error: worst,
        worst_index,
        rtol,
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, eps)?;
    Ok(compare_gradients(&analytic, &numeric, rtol))
}
