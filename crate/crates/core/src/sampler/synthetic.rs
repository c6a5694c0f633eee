use super::condition::{assemble_person_condition, category_region, pose_raster, PersonCondition};
use crate::denoiser::{ModelConfig, ReferenceItem};
use crate::error::{Error, Result};
use crate::numkernel::{Rng, Scalar, Tensor};

/// A complete synthetic sampling request.
#[derive(Debug, Clone)]
pub struct Request<S: Scalar> {
    pub person: PersonCondition<S>,
    pub items: Vec<ReferenceItem<S>>,
    /// Starting noise `z_T`.
    pub z_t: Tensor<S>,
}

/// Random person, `k` references on distinct random categories, and
/// random mask rectangles inside the chosen categories' regions.
pub fn synthetic_request<S: Scalar>(cfg: &ModelConfig, k: usize, ref_grid: [usize; 2], seed: u64) -> Result<Request<S>> {
    if k > cfg.categories.len() {
        return Err(Error::Config(format!("{k} references for {} categories", cfg.categories.len())));
    }
    if ref_grid.contains(&0) {
        return Err(Error::EmptySegment("reference grid".into()));
    }
    let mut rng = Rng::new(seed);
    let d = cfg.latent_channels();
    let uniform = |rng: &mut Rng, shape: &[usize]| Tensor::<S>::from_fn(shape, |_| S::of(rng.uniform(-1.0, 1.0)));

    let person = uniform(&mut rng, &[cfg.n_x(), d]);
    let mut cats: Vec<usize> = (0..cfg.categories.len()).collect();
    rng.shuffle(&mut cats);
    cats.truncate(k);

    let [h, w, _] = cfg.image_shape();
    let p = cfg.patch;
    let mut mask = vec![S::zero(); h * w];
    for &c in &cats {
        let [r0, c0, rh, rw] = category_region(cfg, c)?;
        let (ph, pw) = (rh * p, rw * p);
        let mh = rng.range(ph.div_ceil(2), ph + 1);
        let mw = rng.range(pw.div_ceil(2), pw + 1);
        let y0 = r0 * p + rng.range(0, ph - mh + 1);
        let x0 = c0 * p + rng.range(0, pw - mw + 1);
        for y in y0..y0 + mh {
            for x in x0..x0 + mw {
                mask[y * w + x] = S::one();
            }
        }
    }
    let mask = Tensor::new(&[h, w, 1], mask)?;
    let person = assemble_person_condition(cfg, &person, &mask, &pose_raster(cfg))?;

    let n_r = ref_grid[0] * ref_grid[1];
    let items = cats
        .iter()
        .map(|&c| ReferenceItem {
            latent: uniform(&mut rng, &[n_r, d]),
            grid: ref_grid,
            category: c,
        })
        .collect();
    let z_t = Tensor::from_fn(&[cfg.n_x(), d], |_| S::of(rng.normal()));
    Ok(Request { person, items, z_t })
}
