use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adamax with a per-epoch exponential learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxState {
    pub base_lr: f64,
    pub decay: f64,
    pub step: u64,
    /// First moments by parameter name.
    pub m: BTreeMap<String, Vec<f64>>,
    /// Infinity-norm accumulators by parameter name.
    pub u: BTreeMap<String, Vec<f64>>,
}

impl AdamaxState {
    pub fn new(base_lr: f64, decay: f64) -> Self {
        Self {
            base_lr,
            decay,
            step: 0,
            m: BTreeMap::new(),
            u: BTreeMap::new(),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi(epoch as i32)
    }

    /// One update of every parameter from its stored gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        epoch: usize,
    ) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params
            .iter()
            .find(|p| p.grad().data().iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGrad(p.name().to_string()));
        }
        self.step += 1;
        let lr = self.lr(epoch);
        let correction = 1.0 - BETA1.powi(self.step.min(i32::MAX as u64) as i32);
        for p in params.iter_mut() {
            let n = p.numel();
            let name = p.name().to_string();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let u = self.u.entry(name).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || u.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adamax",
                    lhs: vec![n],
                    rhs: vec![m.len()],
                });
            }
            let (value, grad) = p.value_and_grad_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                u[i] = (BETA2 * u[i]).max(g.abs());
                value[i] -= lr * m[i] / (correction * (u[i] + EPS));
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    max_norm: f64,
) -> f64 {
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    let norm = params
        .iter()
        .flat_map(|p| p.grad().data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
