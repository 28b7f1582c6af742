use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use super::{NumericError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Column window of a 2-D node used as query, key or value input to attention.
///
/// A fused QKV projection can feed all three sources from one node with
/// different offsets.
#[derive(Debug, Clone, Copy)]
pub struct AttnSource {
    pub var: Var,
    pub offset: usize,
}

impl AttnSource {
    pub fn new(var: Var, offset: usize) -> Self {
        Self { var, offset }
    }
}

#[derive(Debug)]
struct AttnSaved<S> {
    q: AttnSource,
    k: AttnSource,
    v: AttnSource,
    heads: usize,
    tq: usize,
    tk: usize,
    kv_index: Vec<usize>,
    scale: S,
    probs: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Gelu { x: Var, dy: Vec<S> },
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        sources: Vec<Var>,
        map: Vec<Option<(usize, usize)>>,
    },
    Attention(Box<AttnSaved<S>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<S>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    StopGrad,
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape in reverse and accumulates gradients.
#[derive(Debug)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    nonfinite: Option<&'static str>,
    track_params: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tanh-approximated GELU values and derivatives; tanh is evaluated as
/// `1 − 2/(exp(2u) + 1)`, exact at both tails.
fn gelu_all<S: Scalar>(xs: &[S], want_grad: bool) -> (Vec<S>, Vec<S>) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let a3 = S::lit(3.0 * 0.044715);
    let half = S::lit(0.5);
    let two = S::lit(2.0);
    let mut e: Vec<S> = xs.iter().map(|&x| two * c * (x + a * x * x * x)).collect();
    S::exp_in_place(&mut e);
    let mut ys = Vec::with_capacity(xs.len());
    let mut dys = Vec::with_capacity(if want_grad { xs.len() } else { 0 });
    for (&x, &ev) in xs.iter().zip(&e) {
        let t = S::one() - two / (ev + S::one());
        ys.push(half * x * (S::one() + t));
        if want_grad {
            dys.push(half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + a3 * x * x));
        }
    }
    (ys, dys)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softmax over each contiguous row of length `cols`.
pub fn softmax_in_place<S: Scalar>(data: &mut [S], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        row.iter_mut().for_each(|v| *v -= max);
        S::exp_in_place(row);
        let total: S = row.iter().copied().sum();
        let inv = S::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            nonfinite: None,
            track_params: true,
        }
    }

    /// A tape whose parameters require no gradient, so forward passes skip
    /// saving backward state.
    pub fn no_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(NumericError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push("input", t, Op::Leaf, false)
    }

    /// Free variable that receives a gradient but is not owned by a parameter store.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Var {
        let track = self.track_params;
        self.push("param", store.value(id).clone(), Op::Param(id), track)
    }

    /// Parameters recorded on this tape together with their gradients.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[S]>)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, self.grads.get(i).and_then(|g| g.as_deref()))),
            _ => None,
        })
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(NumericError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.data(a), k, 1, self.data(b), n, 1, S::zero(), &mut out, n, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(name, Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `[.., c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(NumericError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push("add_bias", Tensor::new(&shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// `x·w + b` for `x: [r, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push("scale", Tensor::new(&shape, data)?, Op::Scale(x, s), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let rg = self.rg(x);
        let (data, dy) = gelu_all(self.data(x), rg);
        let shape = self.shape(x).to_vec();
        Ok(self.push("gelu", Tensor::new(&shape, data)?, Op::Gelu { x, dy }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push("sigmoid", Tensor::new(&shape, data)?, Op::Sigmoid(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.data(x).to_vec();
        softmax_in_place(&mut data, cols);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push("softmax", Tensor::new(&shape, data)?, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(NumericError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).rows();
        let g = self.data(gamma);
        let b = self.data(beta);
        let inv_c = S::one() / S::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for row in self.data(x).chunks(c) {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            "layer_norm",
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Builds `[map.len(), d]` by copying row `r` of `sources[s]` for every
    /// `Some((s, r))` entry and a zero row for `None`.
    ///
    /// All sources must be 2-D with the same number of columns.
    pub fn gather_rows(&mut self, sources: &[Var], map: &[Option<(usize, usize)>]) -> Result<Var> {
        if sources.is_empty() || map.is_empty() {
            return Err(NumericError::Invalid {
                op: "gather_rows",
                reason: "needs at least one source and one output row".into(),
            });
        }
        let (_, d) = self.expect_2d("gather_rows", sources[0])?;
        for &s in sources {
            let (_, ds) = self.expect_2d("gather_rows", s)?;
            if ds != d {
                return Err(NumericError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: self.shape(sources[0]).to_vec(),
                    rhs: self.shape(s).to_vec(),
                });
            }
        }
        let mut out = vec![S::zero(); map.len() * d];
        for (i, entry) in map.iter().enumerate() {
            if let Some((s, r)) = *entry {
                let src = *sources.get(s).ok_or(NumericError::IndexOutOfRange {
                    op: "gather_rows",
                    index: s,
                    limit: sources.len(),
                })?;
                let rows = self.shape(src)[0];
                if r >= rows {
                    return Err(NumericError::IndexOutOfRange {
                        op: "gather_rows",
                        index: r,
                        limit: rows,
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(self.value(src).row(r));
            }
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            "gather_rows",
            Tensor::new(&[map.len(), d], out)?,
            Op::Gather {
                sources: sources.to_vec(),
                map: map.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let map: Vec<_> = ids.iter().map(|&i| Some((0, i))).collect();
        self.gather_rows(&[table], &map)
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// Queries are `q_blocks = kv_index.len()` blocks of `tq` rows; query block
    /// `b` attends to key/value block `kv_index[b]` of `tk` rows. Each source
    /// contributes a `d_model`-wide column window. Output is `[q_blocks·tq, d_model]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: AttnSource,
        k: AttnSource,
        v: AttnSource,
        d_model: usize,
        heads: usize,
        tq: usize,
        tk: usize,
        kv_index: &[usize],
    ) -> Result<Var> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NumericError::Invalid {
                op: "attention",
                reason: format!("d_model {d_model} not divisible by {heads} heads"),
            });
        }
        let (qr, qc) = self.expect_2d("attention", q.var)?;
        let (kr, kc) = self.expect_2d("attention", k.var)?;
        let (vr, vc) = self.expect_2d("attention", v.var)?;
        let blocks = kv_index.len();
        if qr != blocks * tq || q.offset + d_model > qc {
            return Err(NumericError::ShapeMismatch {
                op: "attention(query)",
                lhs: vec![qr, qc],
                rhs: vec![blocks * tq, q.offset + d_model],
            });
        }
        if kr != vr || kr % tk != 0 || k.offset + d_model > kc || v.offset + d_model > vc {
            return Err(NumericError::ShapeMismatch {
                op: "attention(key/value)",
                lhs: vec![kr, kc],
                rhs: vec![vr, vc],
            });
        }
        let kv_blocks = kr / tk;
        if let Some(&bad) = kv_index.iter().find(|&&i| i >= kv_blocks) {
            return Err(NumericError::IndexOutOfRange {
                op: "attention",
                index: bad,
                limit: kv_blocks,
            });
        }
        let dh = d_model / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![S::zero(); blocks * heads * tq * tk];
        let mut out = vec![S::zero(); blocks * tq * d_model];
        let qd = self.data(q.var);
        let kd = self.data(k.var);
        let vd = self.data(v.var);
        let mut scratch = Vec::new();
        for (b, &kb) in kv_index.iter().enumerate() {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let qo = b * tq * qc + q.offset + h * dh;
                let ko = kb * tk * kc + k.offset + h * dh;
                let vo = kb * tk * vc + v.offset + h * dh;
                let sc = &mut scratch;
                head_gemm(tq, dh, tk, scale, (&qd[qo..], qc, 1), (&kd[ko..], 1, kc), p, tk, false, sc);
                softmax_in_place(p, tk);
                let oo = b * tq * d_model + h * dh;
                let dst = &mut out[oo..];
                head_gemm(tq, tk, dh, S::one(), (p, tk, 1), (&vd[vo..], vc, 1), dst, d_model, false, sc);
            }
        }
        let rg = self.rg(q.var) || self.rg(k.var) || self.rg(v.var);
        Ok(self.push(
            "attention",
            Tensor::new(&[blocks * tq, d_model], out)?,
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                heads,
                tq,
                tk,
                kv_index: kv_index.to_vec(),
                scale,
                probs,
            })),
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows that carry a target; rows with
    /// `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, k) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(NumericError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, k],
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumericError::Invalid {
                op: "cross_entropy",
                reason: "no target rows".into(),
            });
        }
        let mut probs = vec![S::zero(); r * k];
        let mut total = S::zero();
        let data = self.data(logits);
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(NumericError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: k,
                });
            }
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[t];
            let p = &mut probs[i * k..(i + 1) * k];
            p.copy_from_slice(row);
            softmax_in_place(p, k);
        }
        let loss = total / S::from_usize(count).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(NumericError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: S = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(S::zero()) - x * t + (S::one() + (-x.abs()).exp()).ln())
            .sum();
        let loss = total / S::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = S::from_usize(self.value(a).len()).unwrap();
        let total: S = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("mse", Tensor::scalar(total / n), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push("sum", Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_usize(self.value(x).len()).unwrap();
        let total: S = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push("mean", Tensor::scalar(total / n), Op::Mean(x), rg))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push("stop_grad", t, Op::StopGrad, false)
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn max_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.expect_2d("max_pool_rows", x)?;
        if group == 0 || r % group != 0 {
            return Err(NumericError::InvalidShape {
                op: "max_pool_rows",
                shape: vec![r, c],
                reason: format!("rows not divisible by group {group}"),
            });
        }
        let g = r / group;
        let data = self.data(x);
        let mut out = vec![S::neg_infinity(); g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for ri in gi * group..(gi + 1) * group {
                for j in 0..c {
                    let v = data[ri * c + j];
                    if v > out[gi * c + j] {
                        out[gi * c + j] = v;
                        argmax[gi * c + j] = ri * c + j;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push("max_pool_rows", Tensor::new(&[g, c], out)?, Op::MaxPoolRows { x, argmax }, rg))
    }

    /// Reverse pass from a scalar loss. Gradients of earlier passes on this
    /// tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(NumericError::EmptyTape);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericError::NotScalar {
                shape: shape.to_vec(),
            });
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    self.grads = grads;
                    return Err(NumericError::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let value = &nodes[i].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if rg(*a) {
                    let bd = nodes[b.0].value.data();
                    S::gemm(m, n, k, S::one(), g, n, 1, bd, 1, n, S::one(), slot(grads, nodes, *a), k, 1);
                }
                if rg(*b) {
                    let ad = nodes[a.0].value.data();
                    S::gemm(k, m, n, S::one(), ad, 1, k, g, n, 1, S::one(), slot(grads, nodes, *b), n, 1);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, S::one()), (*b, S::one())] {
                    if rg(v) {
                        for (d, &gv) in slot(grads, nodes, v).iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, S::one()), (*b, -S::one())] {
                    if rg(v) {
                        for (d, &gv) in slot(grads, nodes, v).iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bd = nodes[b.0].value.data();
                    for ((d, &gv), &bv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if rg(*b) {
                    let ad = nodes[a.0].value.data();
                    for ((d, &gv), &av) in slot(grads, nodes, *b).iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    for (d, &gv) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if rg(*b) {
                    let c = value.cols();
                    let db = slot(grads, nodes, *b);
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    for (d, &gv) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::Gelu { x, dy } => {
                if rg(*x) {
                    for ((d, &gv), &dv) in slot(grads, nodes, *x).iter_mut().zip(g).zip(dy) {
                        *d += gv * dv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if rg(*x) {
                    for ((d, &gv), &y) in slot(grads, nodes, *x).iter_mut().zip(g).zip(value.data()) {
                        *d += gv * y * (S::one() - y);
                    }
                }
            }
            Op::Softmax(x) => {
                if rg(*x) {
                    let c = value.cols();
                    let dx = slot(grads, nodes, *x);
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(value.data().chunks(c)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = value.cols();
                if rg(*gamma) {
                    let dg = slot(grads, nodes, *gamma);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                }
                if rg(*beta) {
                    let db = slot(grads, nodes, *beta);
                    for grow in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                if rg(*x) {
                    let gam = nodes[gamma.0].value.data();
                    let inv_c = S::one() / S::from_usize(c).unwrap();
                    let dx = slot(grads, nodes, *x);
                    let mut dh = vec![S::zero(); c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..c {
                            dh[j] = grow[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { sources, map } => {
                let d = value.cols();
                for (row, entry) in map.iter().enumerate() {
                    if let Some((s, r)) = *entry {
                        let src = sources[s];
                        if rg(src) {
                            let ds = slot(grads, nodes, src);
                            for (dv, &gv) in ds[r * d..(r + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                                *dv += gv;
                            }
                        }
                    }
                }
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if rg(*logits) {
                    let k = nodes[logits.0].value.cols();
                    let w = g[0] / S::from_usize(*count).unwrap();
                    let dl = slot(grads, nodes, *logits);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..k {
                            dl[r * k + j] += w * probs[r * k + j];
                        }
                        dl[r * k + t] -= w;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if rg(*logits) {
                    let xd = nodes[logits.0].value.data();
                    let w = g[0] / S::from_usize(xd.len()).unwrap();
                    for ((d, &x), &t) in slot(grads, nodes, *logits).iter_mut().zip(xd).zip(targets) {
                        *d += w * (sigmoid(x) - t);
                    }
                }
            }
            Op::Mse(a, b) => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let w = S::lit(2.0) * g[0] / S::from_usize(ad.len()).unwrap();
                if rg(*a) {
                    for ((d, &x), &y) in slot(grads, nodes, *a).iter_mut().zip(ad).zip(bd) {
                        *d += w * (x - y);
                    }
                }
                if rg(*b) {
                    for ((d, &x), &y) in slot(grads, nodes, *b).iter_mut().zip(ad).zip(bd) {
                        *d -= w * (x - y);
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    for d in slot(grads, nodes, *x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let dx = slot(grads, nodes, *x);
                    let w = g[0] / S::from_usize(dx.len()).unwrap();
                    for d in dx.iter_mut() {
                        *d += w;
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if rg(*x) {
                    let dx = slot(grads, nodes, *x);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, a: &AttnSaved<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let d_model = g.len() / (a.kv_index.len() * a.tq);
        let dh = d_model / a.heads;
        let (tq, tk) = (a.tq, a.tk);
        let qc = nodes[a.q.var.0].value.cols();
        let kc = nodes[a.k.var.0].value.cols();
        let vc = nodes[a.v.var.0].value.cols();
        let qd = nodes[a.q.var.0].value.data();
        let kd = nodes[a.k.var.0].value.data();
        let vd = nodes[a.v.var.0].value.data();
        for src in [a.q.var, a.k.var, a.v.var] {
            if nodes[src.0].requires_grad && grads[src.0].is_none() {
                grads[src.0] = Some(vec![S::zero(); nodes[src.0].value.len()]);
            }
        }
        let mut dp = vec![S::zero(); tq * tk];
        let mut sc = Vec::new();
        for (b, &kb) in a.kv_index.iter().enumerate() {
            for h in 0..a.heads {
                let p = &a.probs[(b * a.heads + h) * tq * tk..(b * a.heads + h + 1) * tq * tk];
                let go = b * tq * d_model + h * dh;
                let qo = b * tq * qc + a.q.offset + h * dh;
                let ko = kb * tk * kc + a.k.offset + h * dh;
                let vo = kb * tk * vc + a.v.offset + h * dh;
                if let Some(dv) = grads[a.v.var.0].as_mut() {
                    let gs = (&g[go..], d_model, 1);
                    head_gemm(tk, tq, dh, S::one(), (p, 1, tk), gs, &mut dv[vo..], vc, true, &mut sc);
                }
                let (gs, vs) = ((&g[go..], d_model, 1), (&vd[vo..], 1, vc));
                head_gemm(tq, dh, tk, S::one(), gs, vs, &mut dp, tk, false, &mut sc);
                for (drow, prow) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot: S = drow.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                if let Some(dq) = grads[a.q.var.0].as_mut() {
                    let ks = (&kd[ko..], kc, 1);
                    head_gemm(tq, tk, dh, a.scale, (&dp, tk, 1), ks, &mut dq[qo..], qc, true, &mut sc);
                }
                if let Some(dk) = grads[a.k.var.0].as_mut() {
                    let qs = (&qd[qo..], qc, 1);
                    head_gemm(tk, tq, dh, a.scale, (&dp, 1, tk), qs, &mut dk[ko..], kc, true, &mut sc);
                }
            }
        }
    }
}

/// `C[m×n] (+)= alpha · A[m×k] · B[k×n]` for the narrow per-head products,
/// with every operand addressed by row and column strides. Written as row
/// updates so the inner loop vectorizes; when `n` is narrow the transposed
/// product is formed instead so the inner loop runs over `m`.
#[allow(clippy::too_many_arguments)]
fn head_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    (a, ra, ca): (&[S], usize, usize),
    (b, rb, cb): (&[S], usize, usize),
    c: &mut [S],
    rc: usize,
    accumulate: bool,
    scratch: &mut Vec<S>,
) {
    if n < m && n < 32 {
        // pack Aᵀ (k×m) and a row of the transposed result after it
        scratch.clear();
        scratch.resize(k * m + m, S::zero());
        let (at, trow) = scratch.split_at_mut(k * m);
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * ra + j * ca];
            }
        }
        for col in 0..n {
            trow.iter_mut().for_each(|v| *v = S::zero());
            for j in 0..k {
                let s = alpha * b[j * rb + col * cb];
                for (tv, &av) in trow.iter_mut().zip(&at[j * m..(j + 1) * m]) {
                    *tv += s * av;
                }
            }
            for (i, &tv) in trow.iter().enumerate() {
                let cv = &mut c[i * rc + col];
                *cv = if accumulate { *cv + tv } else { tv };
            }
        }
        return;
    }
    let packed;
    let (bp, rbp) = if cb == 1 {
        (b, rb)
    } else {
        scratch.clear();
        scratch.resize(k * n, S::zero());
        for j in 0..k {
            for col in 0..n {
                scratch[j * n + col] = b[j * rb + col * cb];
            }
        }
        packed = &scratch[..];
        (packed, n)
    };
    for i in 0..m {
        let crow = &mut c[i * rc..i * rc + n];
        if !accumulate {
            crow.iter_mut().for_each(|v| *v = S::zero());
        }
        for j in 0..k {
            let s = alpha * a[i * ra + j * ca];
            for (cv, &bv) in crow.iter_mut().zip(&bp[j * rbp..j * rbp + n]) {
                *cv += s * bv;
            }
        }
    }
}

fn slot<'g, S: Scalar>(grads: &'g mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> &'g mut Vec<S> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gather { .. } => "gather_rows",
        Op::Attention(_) => "attention",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::Mse(..) => "mse",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::StopGrad => "stop_grad",
        Op::MaxPoolRows { .. } => "max_pool_rows",
    }
}
