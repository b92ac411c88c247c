//! Reverse-mode differentiation over a linear tape of tensor ops.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, FeatureAttnCache, LayerNormCache};
use super::tensor::{AttnMask, Tensor};
use super::Exec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<AttnMask>,
        probs: Vec<f32>,
    },
    FeatureAttention {
        e: Var,
        present: Vec<bool>,
        mean: bool,
        cache: FeatureAttnCache,
    },
    MaskedSoftmax {
        x: Var,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Stack(Vec<Var>),
    Dot {
        x: Var,
        w: Vec<f32>,
    },
    Mse {
        pred: Var,
        target: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records every op applied to tracked values so gradients can be replayed backwards.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    dropout: Option<(f32, ChaCha8Rng)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(128),
            params: HashMap::new(),
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate, driven by `rng`.
    pub fn with_dropout(mut self, rate: f32, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant_value(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf created for parameter `id`, if the forward pass touched it.
    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        let out = kernels::masked_softmax(self.get(x), mask)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedSoftmax { x }, ng))
    }

    /// Scalar `Σ x_i w_i`.
    pub fn dot_const(&mut self, x: Var, w: Vec<f32>) -> Result<Var> {
        let xv = self.get(x);
        if xv.len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                lhs: xv.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s: f64 = xv.data().iter().zip(&w).map(|(a, b)| *a as f64 * *b as f64).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::Dot { x, w }, ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<f32>) -> Result<Var> {
        let pv = self.get(pred);
        if pv.len() != target.len() || target.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        let loss = (s / target.len() as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NonFinite("mse"));
        }
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, ng))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.get(*a), self.get(*b));
                    if self.ng(*a) {
                        acc(*a, kernels::matmul_nt(&g, bv), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, kernels::matmul_tn(av, &g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, b) => {
                    let c = g.cols();
                    let mut db = vec![0.0f32; c];
                    for i in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    let bshape = self.get(*b).shape().to_vec();
                    acc(*b, Tensor::new(bshape, db).expect("bias grad"), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = kernels::mul(&g, self.get(*b)).expect("mul grad");
                    let db = kernels::mul(&g, self.get(*a)).expect("mul grad");
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, kernels::scale(&g, *s), &mut grads),
                Op::Relu(a) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, o)| if *o > 0.0 { *gi } else { 0.0 })
                        .collect();
                    acc(
                        *a,
                        Tensor::new(g.shape().to_vec(), data).expect("relu grad"),
                        &mut grads,
                    );
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(self.get(*gain), cache, &g);
                    acc(*x, dx, &mut grads);
                    acc(*gain, dg, &mut grads);
                    acc(*bias, db, &mut grads);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::mha_backward(
                        self.get(*q),
                        self.get(*k),
                        self.get(*v),
                        *heads,
                        probs,
                        mask.as_ref(),
                        &g,
                    );
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                    acc(*v, dv, &mut grads);
                }
                Op::FeatureAttention {
                    e,
                    present,
                    mean,
                    cache,
                } => {
                    let de = kernels::feature_attention_backward(self.get(*e), present, *mean, cache, &g);
                    acc(*e, de, &mut grads);
                }
                Op::MaskedSoftmax { x } => {
                    acc(*x, kernels::masked_softmax_backward(&node.value, &g), &mut grads);
                }
                Op::Gather { table, idx } => {
                    let tv = self.get(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (row, &r) in idx.iter().enumerate() {
                        for (d, x) in dt.row_mut(r).iter_mut().zip(g.row(row)) {
                            *d += x;
                        }
                    }
                    acc(*table, dt, &mut grads);
                }
                Op::Stack(parts) => {
                    let shape = g.shape();
                    let (s, nv, d) = (shape[0], shape[1], shape[2]);
                    for (v, p) in parts.iter().enumerate() {
                        if !self.ng(*p) {
                            continue;
                        }
                        let mut dp = vec![0.0f32; s * d];
                        for i in 0..s {
                            dp[i * d..(i + 1) * d].copy_from_slice(&g.data()[(i * nv + v) * d..(i * nv + v + 1) * d]);
                        }
                        acc(*p, Tensor::matrix(s, d, dp), &mut grads);
                    }
                }
                Op::Dot { x, w } => {
                    let s = g.data()[0];
                    let data = w.iter().map(|wi| wi * s).collect();
                    let shape = self.get(*x).shape().to_vec();
                    acc(*x, Tensor::new(shape, data).expect("dot grad"), &mut grads);
                }
                Op::Mse { pred, target } => {
                    let s = g.data()[0];
                    let pv = self.get(*pred);
                    let n = target.len() as f32;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(p, t)| 2.0 * (p - t) / n * s)
                        .collect();
                    acc(
                        *pred,
                        Tensor::new(pv.shape().to_vec(), data).expect("mse grad"),
                        &mut grads,
                    );
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Exec for Tape {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.get(*v)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.constant_value(t)
    }

    fn param(&mut self, id: usize, t: &Arc<Tensor>) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.var(t.as_ref().clone());
        self.params.insert(id, v);
        v
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(self.get(*a), self.get(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::MatMul(*a, *b), ng))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(self.get(*a), self.get(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::Add(*a, *b), ng))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let out = kernels::add_row(self.get(*a), self.get(*bias))?;
        let ng = self.ng(*a) || self.ng(*bias);
        Ok(self.push(out, Op::AddRow(*a, *bias), ng))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(self.get(*a), self.get(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::Mul(*a, *b), ng))
    }

    fn scale(&mut self, a: &Var, s: f32) -> Var {
        let out = kernels::scale(self.get(*a), s);
        let ng = self.ng(*a);
        self.push(out, Op::Scale(*a, s), ng)
    }

    fn relu(&mut self, a: &Var) -> Var {
        let out = kernels::relu(self.get(*a));
        let ng = self.ng(*a);
        self.push(out, Op::Relu(*a), ng)
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_forward(self.get(*x), self.get(*gain), self.get(*bias))?;
        let ng = self.ng(*x) || self.ng(*gain) || self.ng(*bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                cache,
            },
            ng,
        ))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (out, probs) = kernels::mha_forward(self.get(*q), self.get(*k), self.get(*v), heads, mask)?;
        let ng = self.ng(*q) || self.ng(*k) || self.ng(*v);
        Ok(self.push(
            out,
            Op::Attention {
                q: *q,
                k: *k,
                v: *v,
                heads,
                mask: mask.cloned(),
                probs,
            },
            ng,
        ))
    }

    fn feature_attention(&mut self, e: &Var, present: &[bool], mean: bool) -> Result<Var> {
        let (out, cache) = kernels::feature_attention_forward(self.get(*e), present, mean)?;
        let ng = self.ng(*e);
        Ok(self.push(
            out,
            Op::FeatureAttention {
                e: *e,
                present: present.to_vec(),
                mean,
                cache,
            },
            ng,
        ))
    }

    fn gather(&mut self, table: &Var, idx: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(self.get(*table), idx)?;
        let ng = self.ng(*table);
        Ok(self.push(
            out,
            Op::Gather {
                table: *table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.get(*p)).collect();
        let out = kernels::stack_vars(&refs)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::Stack(parts.to_vec()), ng))
    }

    fn dropout(&mut self, x: &Var) -> Result<Var> {
        let shape = self.get(*x).shape().to_vec();
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(*x);
        };
        let rate = *rate;
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f32>() < rate { 0.0 } else { keep });
        let m = self.constant_value(mask);
        self.mul(x, &m)
    }
}
