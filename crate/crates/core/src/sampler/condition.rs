use crate::denoiser::{ModelConfig, PseudoVae, ReferenceItem};
use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

/// Person-side conditioning: the token-grid mask and the encoded
/// masked-person-plus-pose composite.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonCondition<S: Scalar> {
    /// `n_X × 1`, values in `[0, 1]`.
    pub mask_channel: Tensor<S>,
    /// `n_X × d_lat`.
    pub composite_latent: Tensor<S>,
}

impl<S: Scalar> PersonCondition<S> {
    /// Denoiser input `[z_t | mask | composite]`.
    pub fn input_tokens(&self, z_t: &Tensor<S>) -> Result<Tensor<S>> {
        if z_t.rows() != self.mask_channel.rows() || z_t.cols() != self.composite_latent.cols() {
            return Err(Error::shape("person condition", format!("z_t {:?}", z_t.shape())));
        }
        Tensor::concat_cols(&[z_t, &self.mask_channel, &self.composite_latent])
    }
}

pub fn pseudo_vae<S: Scalar>(cfg: &ModelConfig) -> PseudoVae<S> {
    PseudoVae::new(cfg.patch, cfg.image_channels, cfg.vae_seed).expect("validated config")
}

/// Averages each `p × p` pixel block of an `H × W × 1` mask.
pub fn downsample_mask<S: Scalar>(mask: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let s = mask.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape("mask", format!("{s:?}, expected H×W×1")));
    }
    for (dim, v) in [("height", s[0]), ("width", s[1])] {
        if v % patch != 0 {
            return Err(Error::Indivisible { dim, value: v, patch });
        }
    }
    let (gh, gw) = (s[0] / patch, s[1] / patch);
    let area = S::of((patch * patch) as f64);
    Ok(Tensor::from_fn(&[gh * gw, 1], |i| {
        let (by, bx) = (i / gw, i % gw);
        let mut acc = S::zero();
        for dy in 0..patch {
            for dx in 0..patch {
                acc = acc + mask.data()[(by * patch + dy) * s[1] + bx * patch + dx];
            }
        }
        acc / area
    }))
}

/// Builds the person condition from the person latent, a full-resolution
/// mask (`1` marks the region to synthesize) and a pose raster.
///
/// Masked pixels are cleared before the pose is drawn, so the composite
/// carries no person content under the mask.
pub fn assemble_person_condition<S: Scalar>(
    cfg: &ModelConfig,
    person_latent: &Tensor<S>,
    mask_fullres: &Tensor<S>,
    pose: &Tensor<S>,
) -> Result<PersonCondition<S>> {
    let [h, w, c] = cfg.image_shape();
    if mask_fullres.shape() != [h, w, 1] || pose.shape() != [h, w, 1] {
        return Err(Error::shape(
            "person condition",
            format!("mask {:?}, pose {:?}, image {h}×{w}", mask_fullres.shape(), pose.shape()),
        ));
    }
    if let Some(&bad) = mask_fullres.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::MaskRange(bad.as_f64()));
    }
    let vae = pseudo_vae::<S>(cfg);
    let image = vae.decode(person_latent, cfg.latent_grid)?;
    let m = mask_fullres.data();
    let p = pose.data();
    let composite = Tensor::from_fn(&[h, w, c], |i| {
        let px = i / c;
        let keep = S::one() - m[px];
        if p[px] != S::zero() {
            p[px]
        } else {
            image.data()[i] * keep
        }
    });
    Ok(PersonCondition {
        mask_channel: downsample_mask(mask_fullres, cfg.patch)?,
        composite_latent: vae.encode(&composite)?,
    })
}

/// Encodes reference images into items, one per distinct category.
pub fn encode_references<S: Scalar>(cfg: &ModelConfig, images: &[(Tensor<S>, usize)]) -> Result<Vec<ReferenceItem<S>>> {
    if images.len() > cfg.categories.len() {
        return Err(Error::Config(format!("{} references for {} categories", images.len(), cfg.categories.len())));
    }
    let vae = pseudo_vae::<S>(cfg);
    let mut seen = vec![false; cfg.categories.len()];
    let mut out = Vec::with_capacity(images.len());
    for (img, cat) in images {
        let cat = *cat;
        if cat >= seen.len() {
            return Err(Error::UnknownCategory(cat.to_string()));
        }
        if std::mem::replace(&mut seen[cat], true) {
            return Err(Error::DuplicateCategory(cat));
        }
        let latent = vae.encode(img)?;
        let s = img.shape();
        out.push(ReferenceItem {
            latent,
            grid: [s[0] / cfg.patch, s[1] / cfg.patch],
            category: cat,
        });
    }
    Ok(out)
}

/// Token rectangle `(row, col, height, width)` reserved for a category.
///
/// The grid is cut into 4 row bands and 2 column halves; categories take
/// the slots in table order.
pub fn category_region(cfg: &ModelConfig, category: usize) -> Result<[usize; 4]> {
    let [gh, gw] = cfg.latent_grid;
    if category >= cfg.categories.len() {
        return Err(Error::UnknownCategory(category.to_string()));
    }
    if category >= 8 || gh < 4 || gw < 2 {
        return Err(Error::Config(format!("no region for category {category} on a {gh}×{gw} grid")));
    }
    let (sh, sw) = (gh / 4, gw / 2);
    Ok([(category / 2) * sh, (category % 2) * sw, sh, sw])
}

/// Fixed stick-figure raster at value 0.5: spine, shoulder line, two legs.
pub fn pose_raster<S: Scalar>(cfg: &ModelConfig) -> Tensor<S> {
    let [h, w, _] = cfg.image_shape();
    let mut data = vec![S::zero(); h * w];
    let v = S::of(0.5);
    let cx = w / 2;
    for y in h / 8..h / 2 {
        data[y * w + cx] = v;
    }
    for x in w / 4..(3 * w) / 4 {
        data[(h / 4) * w + x] = v;
    }
    for y in h / 2..h {
        let dx = (y - h / 2) * w / (2 * h).max(1);
        data[y * w + cx.saturating_sub(dx)] = v;
        data[y * w + (cx + dx).min(w - 1)] = v;
    }
    Tensor::from_parts_unchecked(vec![h, w, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            latent_grid: [4, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let m = Tensor::<f64>::from_fn(&[8, 8, 1], |i| ((i / 8 + i % 8) % 2) as f64);
        let d = downsample_mask(&m, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mask_extremes() {
        let c = cfg();
        let mut rng = Rng::new(1);
        let person = Tensor::<f64>::from_fn(&[16, 4], |_| rng.uniform(-1.0, 1.0));
        let pose = pose_raster::<f64>(&c);
        let vae = pseudo_vae::<f64>(&c);

        let ones = Tensor::full(&[8, 8, 1], 1.0);
        let pc = assemble_person_condition(&c, &person, &ones, &pose).unwrap();
        assert_eq!(pc.composite_latent, vae.encode(&pose).unwrap());
        assert!(pc.mask_channel.data().iter().all(|&v| v == 1.0));

        let zeros = Tensor::zeros(&[8, 8, 1]);
        let pc = assemble_person_condition(&c, &person, &zeros, &pose).unwrap();
        let img = vae.decode(&person, [4, 4]).unwrap();
        let overlay = img.zip_map(&pose, "t", |a, p| if p != 0.0 { p } else { a }).unwrap();
        assert!(pc.composite_latent.max_abs_diff(&vae.encode(&overlay).unwrap()).unwrap() < 1e-12);

        let bad = Tensor::full(&[8, 8, 1], 1.5);
        assert!(matches!(assemble_person_condition(&c, &person, &bad, &pose), Err(Error::MaskRange(_))));
    }

    #[test]
    fn references_round_trip_and_reject_duplicates() {
        let c = ModelConfig::default();
        let mut rng = Rng::new(2);
        let imgs: Vec<(Tensor<f64>, usize)> = (0..5)
            .map(|k| (Tensor::from_fn(&[16, 12, 1], |_| rng.uniform(-1.0, 1.0)), k))
            .collect();
        let items = encode_references(&c, &imgs).unwrap();
        assert_eq!(items.len(), 5);
        assert_eq!(items[3].grid, [8, 6]);
        let back = pseudo_vae::<f64>(&c).decode(&items[3].latent, [8, 6]).unwrap();
        assert!(back.max_abs_diff(&imgs[3].0).unwrap() <= 1e-6);
        assert!(encode_references::<f64>(&c, &[]).unwrap().is_empty());
        let dup = vec![imgs[1].clone(), imgs[1].clone()];
        assert!(matches!(encode_references(&c, &dup), Err(Error::DuplicateCategory(1))));
    }

    #[test]
    fn regions_do_not_overlap() {
        let c = ModelConfig::default();
        let mut cover = vec![0; c.n_x()];
        for k in 0..5 {
            let [r, col, h, w] = category_region(&c, k).unwrap();
            for y in r..r + h {
                for x in col..col + w {
                    cover[y * 12 + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&v| v <= 1));
        assert_eq!(cover.iter().sum::<usize>(), 5 * 24);
    }
}
