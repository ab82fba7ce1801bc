//! Central-difference gradient checks in 64-bit.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by every gradient check in this crate:
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(f: &impl Fn(&Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Max relative error between reverse-mode and central-difference gradients of
/// a scalar function of several tensors.
pub fn grad_check_many(
    f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.var(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let fp = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let fm = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check(f: impl Fn(&Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}
