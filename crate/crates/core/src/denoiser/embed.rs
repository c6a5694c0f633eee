use super::config::ModelConfig;
use super::params::Weights;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numkernel::{Scalar, Tensor};

const TIME_BASE: f64 = 10_000.0;
const POSITION_BASE: f64 = 64.0;

/// Interleaved `[sin(x·f_0), cos(x·f_0), …]` with `f_i` geometric from 1 down
/// to `1/base` over `dim/2` pairs.
fn sinusoid(x: f64, dim: usize, base: f64, out: &mut [f64]) {
    let pairs = dim / 2;
    for i in 0..pairs {
        let f = if pairs == 1 {
            1.0
        } else {
            base.powf(-(i as f64) / (pairs - 1) as f64)
        };
        out[2 * i] = (x * f).sin();
        out[2 * i + 1] = (x * f).cos();
    }
}

/// Fixed sinusoidal features of step `t`, before the learned projection.
pub fn timestep_sinusoid<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let mut v = vec![0.0; dim];
    sinusoid(t as f64, dim, TIME_BASE, &mut v);
    Tensor::from_fn(&[1, dim], |i| S::of(v[i]))
}

/// 2-d positions of a row-major `h × w` token grid: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding<S: Scalar>(grid: [usize; 2], width: usize) -> Tensor<S> {
    let half = width / 2;
    let mut data = vec![S::zero(); grid[0] * grid[1] * width];
    let mut buf = vec![0.0; half];
    for r in 0..grid[0] {
        for c in 0..grid[1] {
            let row = &mut data[(r * grid[1] + c) * width..][..width];
            sinusoid(r as f64, half, POSITION_BASE, &mut buf);
            for (o, &v) in row[..half].iter_mut().zip(&buf) {
                *o = S::of(v);
            }
            sinusoid(c as f64, half, POSITION_BASE, &mut buf);
            for (o, &v) in row[half..].iter_mut().zip(&buf) {
                *o = S::of(v);
            }
        }
    }
    Tensor::from_parts_unchecked(vec![grid[0] * grid[1], width], data)
}

/// `γ(t)`: sinusoid followed by a two-layer projection with silu.
pub fn timestep_embed<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cfg: &ModelConfig,
    w: &Weights<G::Value>,
    t: usize,
) -> Result<G::Value> {
    if t >= cfg.t_max {
        return Err(Error::TimestepOutOfRange { t, t_max: cfg.t_max });
    }
    let s = g.constant(timestep_sinusoid(t, cfg.emb_dim));
    let h = g.matmul(&s, &w.time_w1)?;
    let h = g.add_bias(&h, &w.time_b1)?;
    let h = g.silu(&h)?;
    let h = g.matmul(&h, &w.time_w2)?;
    g.add_bias(&h, &w.time_b2)
}

/// Row `category` of the class table. Takes no timestep.
///
/// Without a table every category shares one zero vector.
pub fn class_embed<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cfg: &ModelConfig,
    w: &Weights<G::Value>,
    category: usize,
) -> Result<G::Value> {
    if category >= cfg.categories.len() {
        return Err(Error::UnknownCategory(category.to_string()));
    }
    match &w.class_table {
        Some(table) => g.select_row(table, category),
        None => Ok(g.constant(Tensor::zeros(&[1, cfg.emb_dim]))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;

    #[test]
    fn sinusoid_examples() {
        let z = timestep_sinusoid::<f64>(0, 8);
        assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let one = timestep_sinusoid::<f64>(1, 4);
        let want = [1f64.sin(), 1f64.cos(), 1e-4f64.sin(), 1e-4f64.cos()];
        for (a, b) in one.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn timestep_embedding_is_injective_on_the_grid() {
        let cfg = ModelConfig {
            width: 16,
            emb_dim: 16,
            heads: 2,
            blocks: 1,
            ..ModelConfig::default()
        };
        let w = Weights::<Tensor<f64>>::init(&cfg, 3).unwrap();
        let mut g = Eager::new();
        let all: Vec<Tensor<f64>> = (0..cfg.t_max)
            .map(|t| timestep_embed(&mut g, &cfg, &w, t).unwrap())
            .collect();
        for i in 0..all.len() {
            for j in 0..i {
                assert!(all[i].max_abs_diff(&all[j]).unwrap() > 0.0, "t={i} and t={j} collide");
            }
        }
        assert!(matches!(
            timestep_embed(&mut g, &cfg, &w, cfg.t_max),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn class_rows_are_lookups() {
        let cfg = ModelConfig::default();
        let w = Weights::<Tensor<f64>>::init(&cfg, 1).unwrap();
        let mut g = Eager::new();
        let a = class_embed(&mut g, &cfg, &w, 2).unwrap();
        assert_eq!(a, class_embed(&mut g, &cfg, &w, 2).unwrap());
        assert_ne!(a, class_embed(&mut g, &cfg, &w, 3).unwrap());
        assert_eq!(a.data(), w.class_table.as_ref().unwrap().row(2));
        assert!(matches!(class_embed(&mut g, &cfg, &w, 5), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn positions_are_distinct() {
        let pe = positional_encoding::<f64>([4, 3], 16);
        for i in 0..12 {
            for j in 0..i {
                let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }
}
