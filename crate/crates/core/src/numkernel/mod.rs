//! Dense tensors, the handful of kernels the forecaster needs, and a small
//! reverse-mode differentiation tape.
//!
//! Model code is written once against [`Exec`]; [`Eager`] evaluates it without
//! recording anything (inference), [`Tape`] records it for backpropagation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use std::sync::Arc;

pub use gradcheck::{grad_check, GradCheck};
pub use kernels::{attention, masked_softmax, matmul};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{AttnMask, Tensor};

use crate::error::Result;

/// Execution backend for model code.
pub trait Exec {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// Parameter `id`; tapes create one leaf per id and reuse it.
    fn param(&mut self, id: usize, t: &Arc<Tensor>) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f32) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Self::V>;
    fn feature_attention(&mut self, e: &Self::V, present: &[bool], mean: bool) -> Result<Self::V>;
    fn gather(&mut self, table: &Self::V, idx: &[usize]) -> Result<Self::V>;
    fn stack(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    /// Identity unless the backend was configured with a dropout rate.
    fn dropout(&mut self, x: &Self::V) -> Result<Self::V>;
}

/// Tape-free evaluation. Values are shared, so parameters are never copied.
#[derive(Default)]
pub struct Eager;

impl Exec for Eager {
    type V = Arc<Tensor>;

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn param(&mut self, _id: usize, t: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::clone(t)
    }

    fn matmul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::matmul(a, b).map(Arc::new)
    }

    fn add(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::add(a, b).map(Arc::new)
    }

    fn add_row(&mut self, a: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::add_row(a, bias).map(Arc::new)
    }

    fn mul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::mul(a, b).map(Arc::new)
    }

    fn scale(&mut self, a: &Arc<Tensor>, s: f32) -> Arc<Tensor> {
        Arc::new(kernels::scale(a, s))
    }

    fn relu(&mut self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::relu(a))
    }

    fn layer_norm(&mut self, x: &Arc<Tensor>, gain: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::layer_norm_forward(x, gain, bias).map(|(y, _)| Arc::new(y))
    }

    fn attention(
        &mut self,
        q: &Arc<Tensor>,
        k: &Arc<Tensor>,
        v: &Arc<Tensor>,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Arc<Tensor>> {
        kernels::mha_infer(q, k, v, heads, mask).map(Arc::new)
    }

    fn feature_attention(&mut self, e: &Arc<Tensor>, present: &[bool], mean: bool) -> Result<Arc<Tensor>> {
        kernels::feature_attention_forward(e, present, mean).map(|(o, _)| Arc::new(o))
    }

    fn gather(&mut self, table: &Arc<Tensor>, idx: &[usize]) -> Result<Arc<Tensor>> {
        kernels::gather_rows(table, idx).map(Arc::new)
    }

    fn stack(&mut self, parts: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::stack_vars(&refs).map(Arc::new)
    }

    fn dropout(&mut self, x: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        Ok(Arc::clone(x))
    }
}
