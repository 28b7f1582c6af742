use std::collections::HashMap;

use super::graph::Graph;
use super::tensor::Tensor;
use super::{NumericError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    m: Vec<S>,
    v: Vec<S>,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named learnable tensors in insertion order, with gradients and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<S> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NumericError::DuplicateParameter { name: name.into() });
        }
        let n = value.len();
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad: None,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        });
        self.index.insert(name.into(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericError::UnknownParameter { name: name.into() })
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&[S]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Adds the gradients of every parameter recorded on `graph` to the
    /// stored gradients. A parameter recorded but not reached by backward
    /// receives an explicit zero gradient.
    pub fn accumulate(&mut self, graph: &Graph<S>) {
        for (id, g) in graph.param_grads() {
            let e = &mut self.entries[id.0];
            let n = e.value.len();
            let dst = e.grad.get_or_insert_with(|| vec![S::zero(); n]);
            if let Some(g) = g {
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Multiplies all stored gradients by `s`.
    pub fn scale_grads(&mut self, s: S) {
        for e in &mut self.entries {
            if let Some(g) = e.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// One bias-corrected Adam update; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: f64) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(NumericError::MissingGradient { name: e.name.clone() });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let eps = S::lit(cfg.eps);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr = S::lit(lr);
        for e in &mut self.entries {
            let g = e.grad.take().expect("checked above");
            for (((w, m), v), gv) in e.value.data_mut().iter_mut().zip(&mut e.m).zip(&mut e.v).zip(g) {
                *m = b1 * *m + (S::one() - b1) * gv;
                *v = b2 * *v + (S::one() - b2) * gv * gv;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored parameter
    /// must be present with an identical shape; nothing is modified on error.
    pub fn load_values<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Result<()> {
        let provided: HashMap<&str, &Tensor<S>> = tensors.into_iter().collect();
        for e in &self.entries {
            let t = provided
                .get(e.name.as_str())
                .ok_or_else(|| NumericError::UnknownParameter { name: e.name.clone() })?;
            if t.shape() != e.value.shape() {
                return Err(NumericError::InvalidShape {
                    op: "load_values",
                    shape: t.shape().to_vec(),
                    reason: format!("parameter `{}` expects shape {:?}", e.name, e.value.shape()),
                });
            }
        }
        for e in &mut self.entries {
            e.value = provided[e.name.as_str()].clone();
        }
        Ok(())
    }
}
