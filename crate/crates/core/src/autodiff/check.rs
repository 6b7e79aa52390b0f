//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent reference for the analytic backward rules.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::{relative_error, Tensor};

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_gradients(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = f(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = f(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients of `build` (a scalar-valued graph over leaves).
pub fn analytic_gradients(
    build: &dyn Fn(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &leaves)?;
    let grads = tape.backward(&loss)?;
    Ok((
        loss.value().item(),
        leaves.iter().map(|l| grads.wrt(l)).collect(),
    ))
}

/// Worst per-input relative error between analytic and numeric gradients.
pub fn gradient_error(
    build: &dyn Fn(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Result<f64> {
    let (_, analytic) = analytic_gradients(build, inputs)?;
    let f = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(build(&tape, &leaves)?.value().item())
    };
    let numeric = numeric_gradients(&f, inputs, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max))
}
