use serde::{Deserialize, Serialize};

use super::data::{make_sample, make_sample_with, SyntheticSample, TrainConfig};
use crate::denoiser::{Model, ReferenceItem};
use crate::error::Result;
use crate::numkernel::{Rng, Scalar, Tensor};
use crate::sampler::{sample, ExecMode, SamplerConfig};

const RECON_STREAM: u64 = 5 << 40;
const ROUTE_STREAM: u64 = 6 << 40;

/// Deterministic conditional sampling used by the evaluations: cached,
/// guidance off.
pub fn eval_sampler(steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        guidance_scale: 1.0,
        classifier_free: false,
        mode: ExecMode::Cached,
        eta: 0.0,
        seed,
    }
}

fn noise<S: Scalar>(rng: &mut Rng, like: &Tensor<S>) -> Tensor<S> {
    Tensor::from_fn(like.shape(), |_| S::of(rng.normal()))
}

/// Mean masked-region MSE between sampled `z_0` and the target over
/// `samples` fresh held-out samples.
pub fn reconstruction_mse<S: Scalar>(model: &Model<S>, tc: &TrainConfig, samples: usize, steps: usize) -> Result<f64> {
    let sc = eval_sampler(steps, tc.seed);
    let mut acc = 0.0;
    for i in 0..samples {
        let mut rng = Rng::with_stream(tc.seed, RECON_STREAM + i as u64);
        let s: SyntheticSample<S> = make_sample(&mut rng, &model.cfg, tc)?;
        let z_t = noise(&mut rng, &s.z0);
        let out = sample(model, &z_t, &s.person, &s.items, &sc)?;
        acc += s.masked_mse(&out.z0);
    }
    Ok(acc / samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingCheck {
    /// Trials in which, after swapping the labels, each swapped region is
    /// closer to the item now carrying its label than to the other item.
    pub followed: usize,
    pub trials: usize,
    /// Mean region MSE to the item carrying the label.
    pub mse_follow: f64,
    /// Mean region MSE to the other item.
    pub mse_other: f64,
}

/// MSE between region `category` of `z` and the tokens `item` would place there.
fn region_mse<S: Scalar>(model: &Model<S>, z: &Tensor<S>, item: &ReferenceItem<S>, category: usize) -> Result<f64> {
    let [r0, c0, h, w] = crate::sampler::category_region(&model.cfg, category)?;
    let gw = model.cfg.latent_grid[1];
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let want = item.latent.row(r * item.grid[1] + c);
            let got = z.row((r0 + r) * gw + c0 + c);
            acc += want.iter().zip(got).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
        }
    }
    Ok(acc / (h * w * z.cols()) as f64)
}

/// Samples two-reference requests, swaps the category labels of the two
/// items and checks where each item's content ends up.
pub fn class_routing<S: Scalar>(model: &Model<S>, tc: &TrainConfig, trials: usize, steps: usize) -> Result<RoutingCheck> {
    let sc = eval_sampler(steps, tc.seed);
    let mut out = RoutingCheck {
        followed: 0,
        trials,
        mse_follow: 0.0,
        mse_other: 0.0,
    };
    for i in 0..trials {
        let mut rng = Rng::with_stream(tc.seed, ROUTE_STREAM + i as u64);
        let s: SyntheticSample<S> = make_sample_with(&mut rng, &model.cfg, tc, 2)?;
        let z_t = noise(&mut rng, &s.z0);
        let (a, b) = (&s.items[0], &s.items[1]);
        let swapped = [
            ReferenceItem {
                category: b.category,
                ..a.clone()
            },
            ReferenceItem {
                category: a.category,
                ..b.clone()
            },
        ];
        let z = sample(model, &z_t, &s.person, &swapped, &sc)?.z0;
        // region of b's label now holds a's content, and vice versa
        let follow = region_mse(model, &z, a, b.category)? + region_mse(model, &z, b, a.category)?;
        let other = region_mse(model, &z, b, b.category)? + region_mse(model, &z, a, a.category)?;
        out.mse_follow += follow / 2.0;
        out.mse_other += other / 2.0;
        if follow < other {
            out.followed += 1;
        }
    }
    out.mse_follow /= trials as f64;
    out.mse_other /= trials as f64;
    Ok(out)
}
