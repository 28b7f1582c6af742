//! Parameter initializers and small layer wrappers shared by the networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numeric::{Graph, ParamId, ParameterStore, Result, Tensor, Var};
use crate::scalar::Scalar;

/// Normal(0, std) resampled until within two standard deviations.
pub fn trunc_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break S::lit(v);
        }
    })
}

/// Uniform(−1/√fan_in, 1/√fan_in).
pub fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Registers `{name}.w: [din, dout]` and `{name}.b: [dout]`.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), fan_in_uniform(&[din, dout], din, rng))?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Self { w, b })
    }

    pub fn lookup<S: Scalar>(store: &ParameterStore<S>, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParameterStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Layer normalization whose stored gain is an offset from one, so freshly
/// initialized parameters are all zero.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), Tensor::zeros(&[d]))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, beta })
    }

    pub fn lookup<S: Scalar>(store: &ParameterStore<S>, name: &str) -> Result<Self> {
        Ok(Self {
            gain: store.id(&format!("{name}.gain"))?,
            beta: store.id(&format!("{name}.beta"))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParameterStore<S>, x: Var) -> Result<Var> {
        let d = store.value(self.gain).len();
        let gain = g.param(store, self.gain);
        let ones = g.input(Tensor::from_fn(&[d], |_| S::one()));
        let gamma = g.add(gain, ones)?;
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, S::lit(LN_EPS))
    }
}
