//! Finite-difference oracle shared by the unit tests.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_grad(
    f: &dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    which: usize,
    eps: f64,
) -> Vec<f64> {
    let eval = |xs: &[Tensor]| f(&Tape::no_grad(), xs).unwrap().item();
    let mut out = Vec::with_capacity(inputs[which].numel());
    for k in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[which].data_mut()[k] += eps;
        minus[which].data_mut()[k] -= eps;
        out.push((eval(&plus) - eval(&minus)) / (2.0 * eps));
    }
    out
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_grads(
    f: &dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&tape, &leaves).unwrap();
    let grads = tape.backward(&root).unwrap();
    leaves.iter().map(|l| grads.wrt(l).to_vec()).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

/// Largest relative error over all inputs, ignoring entries whose
/// absolute error is already below `abs_floor`.
pub fn max_fd_error(
    f: &dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    eps: f64,
    abs_floor: f64,
) -> f64 {
    let analytic = analytic_grads(f, inputs);
    let mut worst: f64 = 0.0;
    for (which, a) in analytic.iter().enumerate() {
        let num = numeric_grad(f, inputs, which, eps);
        for (x, y) in a.iter().zip(&num) {
            if (x - y).abs() > abs_floor {
                worst = worst.max(rel_err(*x, *y));
            }
        }
    }
    worst
}

/// Analytic and central-difference gradients of every parameter entry of
/// `model` under `loss`, as `(name, analytic, numeric)` triples.
pub fn param_fd<M: crate::tensor::Parameterized>(
    model: &mut M,
    loss: &dyn Fn(&M, &Tape) -> Result<Tensor>,
    eps: f64,
) -> Vec<(String, f64, f64)> {
    let tape = Tape::new();
    let root = loss(model, &tape).unwrap();
    let grads = tape.backward(&root).unwrap();
    let names: Vec<String> = model
        .params()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let analytic = grads
            .param(name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.params()[pi].numel()]);
        for (k, a) in analytic.into_iter().enumerate() {
            let mut eval = |delta: f64| {
                let orig = model.params()[pi].value().data()[k];
                model.params_mut()[pi].value_mut()[k] = orig + delta;
                let v = loss(model, &Tape::no_grad()).unwrap().item();
                model.params_mut()[pi].value_mut()[k] = orig;
                v
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            out.push((format!("{name}[{k}]"), a, numeric));
        }
    }
    out
}
