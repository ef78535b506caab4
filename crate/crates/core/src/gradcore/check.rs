use alloc::vec::Vec;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Evaluates a scalar function built from tape primitives at `inputs`.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    Ok(tape.value(out).item())
}

/// Reverse-mode gradients of `f` with respect to each input.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let mut g = tape.backward(out)?;
    Ok(ids.iter().map(|id| g.take(*id).expect("leaf gradient")).collect())
}

/// Central-difference gradient with step `eps`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let x0 = work[i].data()[k];
            work[i].data_mut()[k] = x0 + eps;
            let fp = eval_scalar(f, &work)?;
            work[i].data_mut()[k] = x0 - eps;
            let fm = eval_scalar(f, &work)?;
            work[i].data_mut()[k] = x0;
            g.data_mut()[k] = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest relative disagreement between analytic and finite-difference
/// gradients: `max |a − n| / max(1e−12, |n|)` over all coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max)
}
