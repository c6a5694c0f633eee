use serde::{Deserialize, Serialize};

use crate::denoiser::{ModelConfig, ReferenceItem};
use crate::error::{Error, Result};
use crate::numkernel::{Rng, Scalar, Tensor};
use crate::sampler::{assemble_person_condition, category_region, pose_raster, PersonCondition};

/// Knobs of the synthetic inpainting task and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decay of the squared-gradient average.
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Probability of dropping all references of a training example.
    pub ref_dropout: f64,
    /// Token grid of each reference.
    pub ref_grid: [usize; 2],
    pub max_refs: usize,
    /// Token contents are bilinear interpolations of a uniform grid with
    /// this spacing; `1` gives independent tokens.
    pub texture_cell: usize,
    /// Size of the fixed training pool, reshuffled every epoch.
    pub pool: usize,
    pub eval_samples: usize,
    /// Evaluate every this many steps (and at the last step).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            ref_dropout: 0.2,
            ref_grid: [8, 6],
            max_refs: 5,
            texture_cell: 2,
            pool: 1024,
            eval_samples: 16,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.pool == 0 || self.eval_samples == 0 || self.eval_every == 0 {
            return bad("batch, pool, eval_samples and eval_every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and ≥ 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || self.rms_eps <= 0.0 {
            return bad("rms_decay must lie in [0, 1) and rms_eps be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ref_dropout) {
            return bad(format!("ref_dropout {} outside [0, 1]", self.ref_dropout));
        }
        if self.texture_cell == 0 {
            return bad("texture_cell must be positive".into());
        }
        if self.max_refs == 0 || self.max_refs > model.categories.len() {
            return bad(format!("max_refs {} must lie in 1..={}", self.max_refs, model.categories.len()));
        }
        for c in 0..self.max_refs.max(model.categories.len()) {
            let [_, _, h, w] = category_region(model, c)?;
            if h > self.ref_grid[0] || w > self.ref_grid[1] {
                return bad(format!("reference grid {:?} smaller than region {h}×{w}", self.ref_grid));
            }
        }
        Ok(())
    }
}

/// One training pair: `z_0`, its person condition and the references whose
/// tokens fill the masked regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<S: Scalar> {
    pub z0: Tensor<S>,
    pub person: PersonCondition<S>,
    pub items: Vec<ReferenceItem<S>>,
    /// Token-level flag: inside some present category's region.
    pub region: Vec<bool>,
}

impl<S: Scalar> SyntheticSample<S> {
    /// Mean squared error of `z` against `z_0` over the masked tokens.
    pub fn masked_mse(&self, z: &Tensor<S>) -> f64 {
        let d = self.z0.cols();
        let (mut acc, mut n) = (0.0, 0usize);
        for (i, _) in self.region.iter().enumerate().filter(|(_, &m)| m) {
            for (a, b) in z.row(i).iter().zip(self.z0.row(i)) {
                acc += (a.as_f64() - b.as_f64()).powi(2);
            }
            n += d;
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// Writes reference tokens `(r, c)` into region cell `(r, c)` of `z`.
pub fn place_reference<S: Scalar>(cfg: &ModelConfig, z: &mut Tensor<S>, item: &ReferenceItem<S>) -> Result<()> {
    let [r0, c0, h, w] = category_region(cfg, item.category)?;
    let gw = cfg.latent_grid[1];
    let d = z.cols();
    for r in 0..h {
        for c in 0..w {
            let src = item.latent.row(r * item.grid[1] + c).to_vec();
            let dst = (r0 + r) * gw + c0 + c;
            z.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&src);
        }
    }
    Ok(())
}

/// `h·w × channels` random tokens in `[−1, 1]`: per channel, a uniform grid
/// at spacing `cell` interpolated bilinearly onto the token grid.
pub fn texture<S: Scalar>(rng: &mut Rng, grid: [usize; 2], channels: usize, cell: usize) -> Tensor<S> {
    let [h, w] = grid;
    let (ch, cw) = ((h - 1) / cell + 2, (w - 1) / cell + 2);
    let mut out = vec![S::zero(); h * w * channels];
    for k in 0..channels {
        let coarse: Vec<f64> = (0..ch * cw).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for r in 0..h {
            let (i, fy) = (r / cell, (r % cell) as f64 / cell as f64);
            for c in 0..w {
                let (j, fx) = (c / cell, (c % cell) as f64 / cell as f64);
                let at = |a: usize, b: usize| coarse[a * cw + b];
                let top = at(i, j) * (1.0 - fx) + at(i, j + 1) * fx;
                let bottom = at(i + 1, j) * (1.0 - fx) + at(i + 1, j + 1) * fx;
                out[(r * w + c) * channels + k] = S::of(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[h * w, channels], out).expect("consistent shape")
}

/// Draws a sample: 1..=max_refs references on distinct categories, each
/// region of `z_0` filled from its reference, the rest from the person.
pub fn make_sample<S: Scalar>(rng: &mut Rng, cfg: &ModelConfig, tc: &TrainConfig) -> Result<SyntheticSample<S>> {
    let k = rng.range(1, tc.max_refs + 1);
    make_sample_with(rng, cfg, tc, k)
}

/// [`make_sample`] with exactly `k` references.
pub fn make_sample_with<S: Scalar>(rng: &mut Rng, cfg: &ModelConfig, tc: &TrainConfig, k: usize) -> Result<SyntheticSample<S>> {
    let d = cfg.latent_channels();
    let person = texture(rng, cfg.latent_grid, d, tc.texture_cell);
    let mut cats: Vec<usize> = (0..cfg.categories.len()).collect();
    rng.shuffle(&mut cats);
    cats.truncate(k);
    cats.sort_unstable();
    let items: Vec<ReferenceItem<S>> = cats
        .iter()
        .map(|&c| ReferenceItem {
            latent: texture(rng, tc.ref_grid, d, tc.texture_cell),
            grid: tc.ref_grid,
            category: c,
        })
        .collect();

    let mut z0 = person.clone();
    let [h, w, _] = cfg.image_shape();
    let p = cfg.patch;
    let gw = cfg.latent_grid[1];
    let mut region = vec![false; cfg.n_x()];
    let mut mask = vec![S::zero(); h * w];
    for item in &items {
        place_reference(cfg, &mut z0, item)?;
        let [r0, c0, rh, rw] = category_region(cfg, item.category)?;
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                region[r * gw + c] = true;
                for y in r * p..(r + 1) * p {
                    for x in c * p..(c + 1) * p {
                        mask[y * w + x] = S::one();
                    }
                }
            }
        }
    }
    let mask = Tensor::new(&[h, w, 1], mask)?;
    let person = assemble_person_condition(cfg, &person, &mask, &pose_raster(cfg))?;
    Ok(SyntheticSample {
        z0,
        person,
        items,
        region,
    })
}
