//! Tape-based reverse-mode differentiation over whole tensors.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{self, Graph};
use crate::numkernel::{
    self as nk, attention_backward, attention_forward, col_sums, layer_norm_with_stats,
    matmul_nt, matmul_tn, sigmoid, AttnProbs, AttnSpan, LayerNormStats, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape can record and differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    AddBias,
    ScaleShift,
    Silu,
    LayerNorm,
    SoftmaxRows,
    ConcatRows,
    SliceRows { start: usize, len: usize },
    SelectRow { row: usize },
    /// Masked multi-head attention, differentiated as one unit.
    Attention { heads: usize, spans: Vec<AttnSpan> },
    Mse,
    Sum,
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses the attribute-free primitives by name.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::Matmul,
            "add" => Primitive::Add,
            "add_bias" => Primitive::AddBias,
            "scale_shift" => Primitive::ScaleShift,
            "silu" => Primitive::Silu,
            "layer_norm" => Primitive::LayerNorm,
            "softmax_rows" => Primitive::SoftmaxRows,
            "concat_rows" => Primitive::ConcatRows,
            "mse" => Primitive::Mse,
            "sum" => Primitive::Sum,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

enum Saved<S> {
    Nothing,
    LayerNorm(LayerNormStats<S>),
    Attention(AttnProbs<S>),
}

enum NodeKind<S> {
    Leaf,
    Op {
        prim: Primitive,
        inputs: Vec<NodeId>,
        saved: Saved<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    kind: NodeKind<S>,
    requires_grad: bool,
}

/// Append-only record of a computation. Node order is a topological order.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one scalar with respect to every node that needs one.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `id`; `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (non-leaf) operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Op { .. }))
            .count()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, NodeKind::Leaf, true)
    }

    /// An input excluded from differentiation.
    pub fn constant_leaf(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, NodeKind::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, kind: NodeKind<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `prim` on already-recorded nodes and appends the result.
    pub fn record(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::shape("record", format!("node {} is not on the tape", bad.0)));
        }
        let values: Vec<&Tensor<S>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, saved) = evaluate(&prim, &values, true)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(
            value,
            NodeKind::Op {
                prim,
                inputs: inputs.to_vec(),
                saved,
            },
            requires_grad,
        ))
    }

    /// Recomputes every recorded operation from the leaf values, in order.
    pub fn replay(&self) -> Result<Vec<Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.kind {
                NodeKind::Leaf => node.value.clone(),
                NodeKind::Op { prim, inputs, .. } => {
                    let args: Vec<&Tensor<S>> = inputs.iter().map(|i| &values[i.0]).collect();
                    evaluate(prim, &args, false)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Op { prim, inputs, saved } = &node.kind else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let wanted: Vec<bool> = inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let args: Vec<&Tensor<S>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = differentiate(prim, &args, &node.value, saved, &g, &wanted)?;
            for ((input, ig), want) in inputs.iter().zip(input_grads).zip(wanted) {
                if !want {
                    continue;
                }
                let Some(ig) = ig else { continue };
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    None => ig,
                    Some(acc) => nk::add(&acc, &ig)?,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

fn arity(prim: &Primitive, n: usize) -> Result<()> {
    let ok = match prim {
        Primitive::Matmul | Primitive::Add | Primitive::AddBias | Primitive::Mse => n == 2,
        Primitive::ScaleShift | Primitive::LayerNorm | Primitive::Attention { .. } => n == 3,
        Primitive::ConcatRows => n >= 1,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape("record", format!("{prim:?} given {n} inputs")))
    }
}

fn evaluate<S: Scalar>(prim: &Primitive, x: &[&Tensor<S>], keep: bool) -> Result<(Tensor<S>, Saved<S>)> {
    arity(prim, x.len())?;
    let plain = |t: Tensor<S>| (t, Saved::Nothing);
    Ok(match prim {
        Primitive::Matmul => plain(nk::matmul(x[0], x[1])?),
        Primitive::Add => plain(nk::add(x[0], x[1])?),
        Primitive::AddBias => plain(nk::add_bias(x[0], x[1])?),
        Primitive::ScaleShift => plain(nk::scale_shift(x[0], x[1], x[2])?),
        Primitive::Silu => plain(nk::silu(x[0])?),
        Primitive::LayerNorm => {
            let (y, stats) = layer_norm_with_stats(x[0], x[1], x[2])?;
            (y, if keep { Saved::LayerNorm(stats) } else { Saved::Nothing })
        }
        Primitive::SoftmaxRows => plain(nk::softmax_rows(x[0])?),
        Primitive::ConcatRows => plain(Tensor::concat_rows(x)?),
        Primitive::SliceRows { start, len } => plain(x[0].slice_rows(*start, *len)?),
        Primitive::SelectRow { row } => plain(graph::select_row(x[0], *row)?),
        Primitive::Attention { heads, spans } => {
            let (y, probs) = attention_forward(x[0], x[1], x[2], *heads, spans, keep)?;
            (y, probs.map_or(Saved::Nothing, Saved::Attention))
        }
        Primitive::Mse => plain(graph::mse(x[0], x[1])?),
        Primitive::Sum => plain(Tensor::new(&[1], vec![x[0].data().iter().copied().sum::<S>()])?),
    })
}

fn vec_like<S: Scalar>(template: &Tensor<S>, data: Vec<S>) -> Result<Tensor<S>> {
    Tensor::new(template.shape(), data)
}

fn differentiate<S: Scalar>(
    prim: &Primitive,
    x: &[&Tensor<S>],
    out: &Tensor<S>,
    saved: &Saved<S>,
    g: &Tensor<S>,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor<S>>>> {
    let one = S::one();
    Ok(match prim {
        Primitive::Matmul => vec![
            wanted[0].then(|| matmul_nt(g, x[1])).transpose()?,
            wanted[1].then(|| matmul_tn(x[0], g)).transpose()?,
        ],
        Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
        Primitive::AddBias => vec![
            Some(g.clone()),
            Some(vec_like(x[1], col_sums(g)?)?),
        ],
        Primitive::ScaleShift => {
            let (xv, scale) = (x[0], x[1]);
            let d = scale.numel();
            let dx = Tensor::from_fn(xv.shape(), |i| g.data()[i] * (one + scale.data()[i % d]));
            let gx = g.zip_map(xv, "scale_shift", |a, b| a * b)?;
            vec![
                Some(dx),
                Some(vec_like(scale, col_sums(&gx)?)?),
                Some(vec_like(x[2], col_sums(g)?)?),
            ]
        }
        Primitive::Silu => {
            let dx = g.zip_map(x[0], "silu", |gv, xv| {
                let s = sigmoid(xv);
                gv * s * (one + xv * (one - s))
            })?;
            vec![Some(dx)]
        }
        Primitive::LayerNorm => {
            let Saved::LayerNorm(stats) = saved else {
                return Err(Error::shape("layer_norm", "backward without saved statistics"));
            };
            let gain = x[1];
            let (n, d) = g.dims2("layer_norm")?;
            let xh = stats.normalized.data();
            let inv_d = one / S::of(d as f64);
            let mut dx = vec![S::zero(); n * d];
            for i in 0..n {
                let gr = g.row(i);
                let xr = &xh[i * d..(i + 1) * d];
                let mut mean_g = S::zero();
                let mut mean_gx = S::zero();
                for j in 0..d {
                    let gh = gr[j] * gain.data()[j];
                    mean_g = mean_g + gh;
                    mean_gx = mean_gx + gh * xr[j];
                }
                mean_g = mean_g * inv_d;
                mean_gx = mean_gx * inv_d;
                for j in 0..d {
                    let gh = gr[j] * gain.data()[j];
                    dx[i * d + j] = stats.inv_std[i] * (gh - mean_g - xr[j] * mean_gx);
                }
            }
            let gxh = g.zip_map(&stats.normalized, "layer_norm", |a, b| a * b)?;
            vec![
                Some(Tensor::new(&[n, d], dx)?),
                Some(vec_like(gain, col_sums(&gxh)?)?),
                Some(vec_like(x[2], col_sums(g)?)?),
            ]
        }
        Primitive::SoftmaxRows => {
            // y ⊙ (g − ⟨g, y⟩) per row
            let (m, n) = out.dims2("softmax_rows")?;
            let mut dx = vec![S::zero(); m * n];
            for i in 0..m {
                let (y, gr) = (out.row(i), g.row(i));
                let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                for j in 0..n {
                    dx[i * n + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(&[m, n], dx)?)]
        }
        Primitive::ConcatRows => {
            let mut start = 0;
            x.iter()
                .map(|p| {
                    let r = p.rows();
                    let s = g.slice_rows(start, r);
                    start += r;
                    s.map(Some)
                })
                .collect::<Result<_>>()?
        }
        Primitive::SliceRows { start, len } => {
            let (_, n) = x[0].dims2("slice_rows")?;
            let mut dx = vec![S::zero(); x[0].numel()];
            dx[start * n..(start + len) * n].copy_from_slice(g.data());
            vec![Some(vec_like(x[0], dx)?)]
        }
        Primitive::SelectRow { row } => {
            let (_, n) = x[0].dims2("select_row")?;
            let mut dx = vec![S::zero(); x[0].numel()];
            dx[row * n..(row + 1) * n].copy_from_slice(g.data());
            vec![Some(vec_like(x[0], dx)?)]
        }
        Primitive::Attention { heads, spans } => {
            let Saved::Attention(probs) = saved else {
                return Err(Error::shape("attention", "backward without saved weights"));
            };
            let (dq, dk, dv) = attention_backward(x[0], x[1], x[2], *heads, spans, probs, g)?;
            vec![Some(dq), Some(dk), Some(dv)]
        }
        Primitive::Mse => {
            let scale = S::of(2.0) * g.data()[0] / S::of(x[0].numel() as f64);
            let da = x[0].zip_map(x[1], "mse", |a, b| (a - b) * scale)?;
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        }
        Primitive::Sum => vec![Some(Tensor::full(x[0].shape(), g.data()[0]))],
    })
}

impl<S: Scalar> Graph<S> for Tape<S> {
    type Value = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<S> {
        Tape::value(self, *v)
    }

    fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.constant_leaf(t)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Matmul, &[*a, *b])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Add, &[*a, *b])
    }

    fn add_bias(&mut self, x: &NodeId, bias: &NodeId) -> Result<NodeId> {
        self.record(Primitive::AddBias, &[*x, *bias])
    }

    fn scale_shift(&mut self, x: &NodeId, scale: &NodeId, shift: &NodeId) -> Result<NodeId> {
        self.record(Primitive::ScaleShift, &[*x, *scale, *shift])
    }

    fn silu(&mut self, x: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Silu, &[*x])
    }

    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, bias: &NodeId) -> Result<NodeId> {
        self.record(Primitive::LayerNorm, &[*x, *gain, *bias])
    }

    fn softmax_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        self.record(Primitive::SoftmaxRows, &[*x])
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Primitive::ConcatRows, parts)
    }

    fn slice_rows(&mut self, x: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Primitive::SliceRows { start, len }, &[*x])
    }

    fn select_row(&mut self, table: &NodeId, row: usize) -> Result<NodeId> {
        self.record(Primitive::SelectRow { row }, &[*table])
    }

    fn attention(
        &mut self,
        q: &NodeId,
        k: &NodeId,
        v: &NodeId,
        heads: usize,
        spans: &[AttnSpan],
    ) -> Result<NodeId> {
        self.record(
            Primitive::Attention {
                heads,
                spans: spans.to_vec(),
            },
            &[*q, *k, *v],
        )
    }

    fn mse(&mut self, pred: &NodeId, target: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Mse, &[*pred, *target])
    }
}
