//! Multi-head scaled dot-product attention over contiguous key spans.
//!
//! A block mask whose allowed region is one contiguous key range per query
//! segment is expressed as a list of [`AttnSpan`]s. Keys outside a span are
//! never touched, which is arithmetically identical to setting their logits
//! to `−∞` (the dense route in [`masked_attention_dense`]).

use std::ops::Range;

use crate::error::{Error, Result};

use super::ops::{matmul, matmul_nt, softmax_in_place, softmax_rows};
use super::tensor::{Scalar, Tensor};

/// Queries in `queries` attend to keys in `keys` and nothing else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSpan {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl AttnSpan {
    pub fn full(n_q: usize, n_k: usize) -> Vec<AttnSpan> {
        vec![AttnSpan {
            queries: 0..n_q,
            keys: 0..n_k,
        }]
    }
}

/// Softmax weights kept for the backward pass, indexed `[head * spans + span]`,
/// each a row-major `queries × keys` block.
pub type AttnProbs<S> = Vec<Vec<S>>;

struct Geometry {
    n_q: usize,
    n_k: usize,
    d: usize,
    dk: usize,
}

fn validate<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    spans: &[AttnSpan],
) -> Result<Geometry> {
    let (n_q, d) = q.dims2("attention")?;
    let (n_k, dk_) = k.dims2("attention")?;
    let (n_v, dv) = v.dims2("attention")?;
    if dk_ != d || dv != d || n_v != n_k {
        return Err(Error::shape(
            "attention",
            format!("q {n_q}x{d}, k {n_k}x{dk_}, v {n_v}x{dv}"),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let mut covered = vec![false; n_q];
    for s in spans {
        if s.keys.is_empty() || s.keys.end > n_k || s.queries.end > n_q {
            return Err(Error::shape(
                "attention",
                format!("span {:?} -> {:?} outside {n_q}x{n_k}", s.queries, s.keys),
            ));
        }
        for c in &mut covered[s.queries.clone()] {
            if *c {
                return Err(Error::shape("attention", "query rows covered by two spans"));
            }
            *c = true;
        }
    }
    if let Some(row) = covered.iter().position(|c| !c) {
        return Err(Error::DegenerateRow { row });
    }
    Ok(Geometry {
        n_q,
        n_k,
        d,
        dk: d / heads,
    })
}

/// Head `h` of `k` transposed into a `dk × n_k` block.
fn head_transposed<S: Scalar>(k: &[S], n_k: usize, d: usize, dk: usize, h: usize) -> Vec<S> {
    let mut out = vec![S::zero(); dk * n_k];
    for j in 0..n_k {
        for p in 0..dk {
            out[p * n_k + j] = k[j * d + h * dk + p];
        }
    }
    out
}

pub fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    spans: &[AttnSpan],
    keep_probs: bool,
) -> Result<(Tensor<S>, Option<AttnProbs<S>>)> {
    let g = validate(q, k, v, heads, spans)?;
    let scale = S::one() / S::of(g.dk as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![S::zero(); g.n_q * g.d];
    let mut probs = keep_probs.then(|| Vec::with_capacity(heads * spans.len()));
    let mut logits = Vec::new();
    for h in 0..heads {
        let kt = head_transposed(kd, g.n_k, g.d, g.dk, h);
        let c0 = h * g.dk;
        for span in spans {
            let nk = span.keys.len();
            let mut block = if keep_probs {
                Vec::with_capacity(span.queries.len() * nk)
            } else {
                Vec::new()
            };
            for i in span.queries.clone() {
                logits.clear();
                logits.resize(nk, S::zero());
                for p in 0..g.dk {
                    let a = qd[i * g.d + c0 + p];
                    let kt_row = &kt[p * g.n_k + span.keys.start..p * g.n_k + span.keys.end];
                    for (l, &kv) in logits.iter_mut().zip(kt_row) {
                        *l = *l + a * kv;
                    }
                }
                for l in logits.iter_mut() {
                    *l = *l * scale;
                }
                if !softmax_in_place(&mut logits) {
                    return Err(Error::DegenerateRow { row: i });
                }
                let out_row = &mut out[i * g.d + c0..i * g.d + c0 + g.dk];
                for (jj, &w) in logits.iter().enumerate() {
                    let j = span.keys.start + jj;
                    let v_row = &vd[j * g.d + c0..j * g.d + c0 + g.dk];
                    for (o, &vv) in out_row.iter_mut().zip(v_row) {
                        *o = *o + w * vv;
                    }
                }
                if keep_probs {
                    block.extend_from_slice(&logits);
                }
            }
            if let Some(p) = probs.as_mut() {
                p.push(block);
            }
        }
    }
    let out = Tensor::from_parts_unchecked(vec![g.n_q, g.d], out).ensure_finite("attention")?;
    Ok((out, probs))
}

pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    spans: &[AttnSpan],
) -> Result<Tensor<S>> {
    attention_forward(q, k, v, heads, spans, false).map(|(o, _)| o)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
pub fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    spans: &[AttnSpan],
    probs: &AttnProbs<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let g = validate(q, k, v, heads, spans)?;
    if grad_out.shape() != q.shape() || probs.len() != heads * spans.len() {
        return Err(Error::shape("attention_backward", "gradient/probability layout"));
    }
    let scale = S::one() / S::of(g.dk as f64).sqrt();
    let (qd, kd, vd, go) = (q.data(), k.data(), v.data(), grad_out.data());
    let mut dq = vec![S::zero(); g.n_q * g.d];
    let mut dk = vec![S::zero(); g.n_k * g.d];
    let mut dv = vec![S::zero(); g.n_k * g.d];
    let mut ds = Vec::new();
    for h in 0..heads {
        let c0 = h * g.dk;
        for (si, span) in spans.iter().enumerate() {
            let nk = span.keys.len();
            let block = &probs[h * spans.len() + si];
            for (ii, i) in span.queries.clone().enumerate() {
                let p_row = &block[ii * nk..(ii + 1) * nk];
                let go_row = &go[i * g.d + c0..i * g.d + c0 + g.dk];
                ds.clear();
                let mut dot = S::zero();
                for (jj, &p) in p_row.iter().enumerate() {
                    let j = span.keys.start + jj;
                    let v_row = &vd[j * g.d + c0..j * g.d + c0 + g.dk];
                    let dp = go_row.iter().zip(v_row).map(|(&a, &b)| a * b).sum::<S>();
                    ds.push(dp);
                    dot = dot + p * dp;
                    let dv_row = &mut dv[j * g.d + c0..j * g.d + c0 + g.dk];
                    for (o, &a) in dv_row.iter_mut().zip(go_row) {
                        *o = *o + p * a;
                    }
                }
                let q_row = &qd[i * g.d + c0..i * g.d + c0 + g.dk];
                for (jj, &p) in p_row.iter().enumerate() {
                    let s = p * (ds[jj] - dot) * scale;
                    let j = span.keys.start + jj;
                    let k_row = &kd[j * g.d + c0..j * g.d + c0 + g.dk];
                    let dq_row = &mut dq[i * g.d + c0..i * g.d + c0 + g.dk];
                    for (o, &kv) in dq_row.iter_mut().zip(k_row) {
                        *o = *o + s * kv;
                    }
                    let dk_row = &mut dk[j * g.d + c0..j * g.d + c0 + g.dk];
                    for (o, &qv) in dk_row.iter_mut().zip(q_row) {
                        *o = *o + s * qv;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(vec![g.n_q, g.d], dq).ensure_finite("attention_backward")?,
        Tensor::from_parts_unchecked(vec![g.n_k, g.d], dk).ensure_finite("attention_backward")?,
        Tensor::from_parts_unchecked(vec![g.n_k, g.d], dv).ensure_finite("attention_backward")?,
    ))
}

/// Per-head attention weights computed densely: logits of disallowed
/// `(query, key)` pairs are set to `−∞` before `softmax_rows`.
/// `allowed` is row-major `n_q × n_k`.
pub fn attention_probs_dense<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    heads: usize,
    allowed: &[bool],
) -> Result<Vec<Tensor<S>>> {
    let (n_q, d) = q.dims2("attention_dense")?;
    let (n_k, d2) = k.dims2("attention_dense")?;
    if d != d2 || heads == 0 || d % heads != 0 || allowed.len() != n_q * n_k {
        return Err(Error::shape("attention_dense", "inconsistent operands"));
    }
    let dk = d / heads;
    let scale = S::one() / S::of(dk as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = k.slice_cols(h * dk, dk)?;
            let logits = matmul_nt(&qh, &kh)?;
            let masked = Tensor::from_fn(&[n_q, n_k], |idx| {
                if allowed[idx] {
                    logits.data()[idx] * scale
                } else {
                    S::neg_infinity()
                }
            });
            softmax_rows(&masked)
        })
        .collect()
}

/// Reference route for masked attention: dense logits, `−∞` fill, softmax,
/// then a dense weight-value product per head.
pub fn masked_attention_dense<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    allowed: &[bool],
) -> Result<Tensor<S>> {
    let (n_q, d) = q.dims2("attention_dense")?;
    let dk = d / heads.max(1);
    let probs = attention_probs_dense(q, k, heads, allowed)?;
    let mut parts = Vec::with_capacity(heads);
    for (h, p) in probs.iter().enumerate() {
        parts.push(matmul(p, &v.slice_cols(h * dk, dk)?)?);
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    let out = Tensor::concat_cols(&refs)?;
    debug_assert_eq!(out.shape(), &[n_q, d]);
    Ok(out)
}
