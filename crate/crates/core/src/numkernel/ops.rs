//! Dense kernels. Every kernel is pure and checks its output for NaN/Inf.

use crate::error::{Error, Result};

use super::rng::Rng;
use super::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
///
/// Accumulation runs over `k` in index order for every output element, so
/// each output row depends only on its own input row.
#[inline]
pub(crate) fn gemm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![S::zero(); m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Tensor::from_parts_unchecked(vec![m, n], out).ensure_finite("matmul")
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("({k}x{m})ᵀ · {k2}x{n}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let b_row = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out).ensure_finite("matmul_tn")
}

/// Numerically stable softmax of one row in place. `−∞` entries map to 0.
/// Returns false when every entry is `−∞`.
#[inline]
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) -> bool {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return false;
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if row.iter().any(|v| v.is_nan() || *v == S::infinity()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        if !softmax_in_place(row) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out).ensure_finite("softmax_rows")
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats<S> {
    /// Normalized input before the affine map.
    pub normalized: Tensor<S>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<S>,
}

fn check_vec<S: Scalar>(op: &'static str, v: &Tensor<S>, d: usize) -> Result<()> {
    if v.numel() != d {
        return Err(Error::shape(op, format!("vector of {} values, expected {d}", v.numel())));
    }
    Ok(())
}

pub fn layer_norm_with_stats<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(Tensor<S>, LayerNormStats<S>)> {
    let (n, d) = x.dims2("layer_norm")?;
    check_vec("layer_norm", gain, d)?;
    check_vec("layer_norm", bias, d)?;
    let eps = S::of(LAYER_NORM_EPS);
    let inv_d = S::one() / S::of(d as f64);
    let (g, b) = (gain.data(), bias.data());
    let mut normalized = vec![S::zero(); n * d];
    let mut out = vec![S::zero(); n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let r = S::one() / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            normalized[i * d + j] = h;
            out[i * d + j] = h * g[j] + b[j];
        }
    }
    let out = Tensor::from_parts_unchecked(vec![n, d], out).ensure_finite("layer_norm")?;
    Ok((
        out,
        LayerNormStats {
            normalized: Tensor::from_parts_unchecked(vec![n, d], normalized),
            inv_std,
        },
    ))
}

pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    layer_norm_with_stats(x, gain, bias).map(|(y, _)| y)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.map(|v| v * sigmoid(v)).ensure_finite("silu")
}

/// Adds a length-`d` vector to every row of an `n×d` matrix.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = x.dims2("add_bias")?;
    check_vec("add_bias", bias, d)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Tensor::from_parts_unchecked(vec![n, d], out).ensure_finite("add_bias")
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "add", |x, y| x + y)?.ensure_finite("add")
}

/// `x ⊙ (1 + scale) + shift` with `scale`/`shift` broadcast over rows.
pub fn scale_shift<S: Scalar>(x: &Tensor<S>, scale: &Tensor<S>, shift: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = x.dims2("scale_shift")?;
    check_vec("scale_shift", scale, d)?;
    check_vec("scale_shift", shift, d)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        for ((o, &s), &t) in row.iter_mut().zip(scale.data()).zip(shift.data()) {
            *o = *o * (S::one() + s) + t;
        }
    }
    Tensor::from_parts_unchecked(vec![n, d], out).ensure_finite("scale_shift")
}

/// Column sums of an `n×d` matrix as a length-`d` vector.
pub fn col_sums<S: Scalar>(x: &Tensor<S>) -> Result<Vec<S>> {
    let (_, d) = x.dims2("col_sums")?;
    let mut acc = vec![S::zero(); d];
    for row in x.data().chunks_exact(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `±1/sqrt(fan_in)`, fan-in being the leading dimension.
    UniformFanIn,
    Zeros,
    /// Ones on the main diagonal (all ones for vectors).
    Identity,
}

pub fn init_weights<S: Scalar>(shape: &[usize], rng: &mut Rng, scheme: InitScheme) -> Tensor<S> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Identity => {
            if shape.len() == 1 {
                Tensor::full(shape, S::one())
            } else {
                let cols: usize = shape[1..].iter().product();
                Tensor::from_fn(shape, |i| {
                    if i / cols == i % cols {
                        S::one()
                    } else {
                        S::zero()
                    }
                })
            }
        }
        InitScheme::UniformFanIn => {
            let bound = 1.0 / (shape[0].max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| S::of(rng.uniform(-bound, bound)))
        }
    }
}
