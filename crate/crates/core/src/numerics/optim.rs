//! AdamW: adaptive moments with decoupled weight decay.
//!
//! ```text
//! θ ← θ − lr·λ·θ
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment accumulators plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment for a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|m| (m.first.as_slice(), m.second.as_slice()))
    }

    /// One update of every listed parameter. A parameter with no entry in
    /// `grads` is treated as having zero gradient.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        self.step_with(params, |name| grads.param(name))
    }

    /// As [`step`](Self::step), with gradients supplied by a lookup.
    pub fn step_with<'a, I, F>(&mut self, params: I, mut grad_of: F) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        F: FnMut(&str) -> Option<Tensor>,
    {
        let params: Vec<_> = params.into_iter().collect();
        let mut grads = Vec::with_capacity(params.len());
        for (name, p) in &params {
            let g = grad_of(name).unwrap_or_else(|| Tensor::zeros(p.shape()));
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.first.len() != p.len() {
                    return Err(Error::contract(format!(
                        "moment size for {name} does not match parameter"
                    )));
                }
            }
            grads.push(g);
        }

        self.step += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for ((name, p), g) in params.into_iter().zip(grads) {
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![0.0; p.len()],
                    second: vec![0.0; p.len()],
                });
            for (((w, g), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *w *= decay;
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
