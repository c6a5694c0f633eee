//! One set of model-building operations, two evaluators.
//!
//! The denoiser is written once against [`Graph`]. [`Eager`] evaluates each
//! operation immediately (inference, with kernel accounting) and
//! [`crate::autodiff::Tape`] records it for reverse-mode differentiation.

use crate::error::Result;
use crate::numkernel::{self as nk, AttnSpan, Scalar, Tensor};

pub trait Graph<S: Scalar> {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S>;

    /// Data that gradients do not flow into.
    fn constant(&mut self, t: Tensor<S>) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Row-broadcast addition of a length-`d` vector.
    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;

    /// `x ⊙ (1 + scale) + shift`, both broadcast over rows.
    fn scale_shift(
        &mut self,
        x: &Self::Value,
        scale: &Self::Value,
        shift: &Self::Value,
    ) -> Result<Self::Value>;

    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;

    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn slice_rows(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;

    /// Row `row` of a table, as a `1 × width` matrix.
    fn select_row(&mut self, table: &Self::Value, row: usize) -> Result<Self::Value>;

    /// Multi-head attention restricted to the given query/key spans.
    fn attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        heads: usize,
        spans: &[AttnSpan],
    ) -> Result<Self::Value>;

    /// Mean squared error as a `1`-element tensor.
    fn mse(&mut self, pred: &Self::Value, target: &Self::Value) -> Result<Self::Value>;
}

/// Kernel accounting: matmul-bearing work only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KernelStats {
    /// Dense matrix products (projections, mixers, embedding MLP).
    pub matmul_calls: u64,
    /// Attention invocations.
    pub attention_calls: u64,
    /// Multiply-adds in matrix products and in attention logits/values.
    pub multiply_adds: u64,
}

impl KernelStats {
    pub fn kernel_calls(&self) -> u64 {
        self.matmul_calls + self.attention_calls
    }
}

impl std::ops::AddAssign for KernelStats {
    fn add_assign(&mut self, o: Self) {
        self.matmul_calls += o.matmul_calls;
        self.attention_calls += o.attention_calls;
        self.multiply_adds += o.multiply_adds;
    }
}

/// Immediate evaluation with kernel accounting.
#[derive(Debug, Default)]
pub struct Eager {
    pub stats: KernelStats,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<S: Scalar> Graph<S> for Eager {
    type Value = Tensor<S>;

    fn value<'a>(&'a self, v: &'a Tensor<S>) -> &'a Tensor<S> {
        v
    }

    fn constant(&mut self, t: Tensor<S>) -> Tensor<S> {
        t
    }

    fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let out = nk::matmul(a, b)?;
        self.stats.matmul_calls += 1;
        self.stats.multiply_adds += (a.rows() * a.cols() * b.cols()) as u64;
        Ok(out)
    }

    fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        nk::add(a, b)
    }

    fn add_bias(&mut self, x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        nk::add_bias(x, bias)
    }

    fn scale_shift(&mut self, x: &Tensor<S>, scale: &Tensor<S>, shift: &Tensor<S>) -> Result<Tensor<S>> {
        nk::scale_shift(x, scale, shift)
    }

    fn silu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nk::silu(x)
    }

    fn layer_norm(&mut self, x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        nk::layer_norm(x, gain, bias)
    }

    fn softmax_rows(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nk::softmax_rows(x)
    }

    fn concat_rows(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }

    fn slice_rows(&mut self, x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
        x.slice_rows(start, len)
    }

    fn select_row(&mut self, table: &Tensor<S>, row: usize) -> Result<Tensor<S>> {
        select_row(table, row)
    }

    fn attention(
        &mut self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        heads: usize,
        spans: &[AttnSpan],
    ) -> Result<Tensor<S>> {
        let out = nk::attention(q, k, v, heads, spans)?;
        self.stats.attention_calls += 1;
        self.stats.multiply_adds += attention_multiply_adds(q.cols(), spans);
        Ok(out)
    }

    fn mse(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
        mse(pred, target)
    }
}

/// Logit and weight-value multiply-adds of one attention call.
pub fn attention_multiply_adds(width: usize, spans: &[AttnSpan]) -> u64 {
    spans
        .iter()
        .map(|s| 2 * (s.queries.len() * s.keys.len() * width) as u64)
        .sum()
}

pub(crate) fn select_row<S: Scalar>(table: &Tensor<S>, row: usize) -> Result<Tensor<S>> {
    let (m, n) = table.dims2("select_row")?;
    if row >= m {
        return Err(crate::Error::UnknownCategory(row.to_string()));
    }
    Tensor::new(&[1, n], table.row(row).to_vec())
}

pub(crate) fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    let diff = pred.zip_map(target, "mse", |a, b| a - b)?;
    let n = S::of(diff.numel() as f64);
    let s = diff.data().iter().map(|&v| v * v).sum::<S>() / n;
    Tensor::new(&[1], vec![s])?.ensure_finite("mse")
}
