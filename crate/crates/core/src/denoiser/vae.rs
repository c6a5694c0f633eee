use crate::error::{Error, Result};
use crate::numkernel::{matmul, Rng, Scalar, Tensor};

/// Patchify followed by a fixed orthonormal channel mix; decode is the
/// exact transpose.
#[derive(Debug, Clone)]
pub struct PseudoVae<S: Scalar> {
    patch: usize,
    channels: usize,
    /// `d_lat × d_lat`, orthonormal rows.
    basis: Tensor<S>,
}

impl<S: Scalar> PseudoVae<S> {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Result<Self> {
        if patch == 0 || channels == 0 {
            return Err(Error::Config("patch and channels must be positive".into()));
        }
        let n = patch * patch * channels;
        Ok(Self {
            patch,
            channels,
            basis: orthonormal::<S>(n, seed),
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.basis.rows()
    }

    pub fn basis(&self) -> &Tensor<S> {
        &self.basis
    }

    /// `H × W × c` image to `(H/p · W/p) × d_lat` tokens, row-major over the
    /// patch grid.
    pub fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (gh, gw) = self.grid_of(image)?;
        let patches = self.patchify(image, gh, gw);
        matmul(&patches, &self.basis)
    }

    pub fn decode(&self, latent: &Tensor<S>, grid: [usize; 2]) -> Result<Tensor<S>> {
        let (n, d) = latent.dims2("pseudo_vae_decode")?;
        if d != self.latent_channels() || n != grid[0] * grid[1] {
            return Err(Error::shape(
                "pseudo_vae_decode",
                format!("latent {n}x{d} for grid {grid:?}"),
            ));
        }
        let patches = crate::numkernel::matmul_nt(latent, &self.basis)?;
        Ok(self.unpatchify(&patches, grid[0], grid[1]))
    }

    fn grid_of(&self, image: &Tensor<S>) -> Result<(usize, usize)> {
        let s = image.shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::shape("pseudo_vae_encode", format!("image {s:?}, {} channels expected", self.channels)));
        }
        for (dim, v) in [("height", s[0]), ("width", s[1])] {
            if v % self.patch != 0 || v == 0 {
                return Err(Error::Indivisible {
                    dim,
                    value: v,
                    patch: self.patch,
                });
            }
        }
        Ok((s[0] / self.patch, s[1] / self.patch))
    }

    fn patchify(&self, image: &Tensor<S>, gh: usize, gw: usize) -> Tensor<S> {
        let (p, c) = (self.patch, self.channels);
        let w = gw * p;
        let d = p * p * c;
        let src = image.data();
        let mut out = vec![S::zero(); gh * gw * d];
        for by in 0..gh {
            for bx in 0..gw {
                let dst = &mut out[(by * gw + bx) * d..][..d];
                for dy in 0..p {
                    let row = (by * p + dy) * w + bx * p;
                    dst[dy * p * c..(dy + 1) * p * c].copy_from_slice(&src[row * c..(row + p) * c]);
                }
            }
        }
        Tensor::from_parts_unchecked(vec![gh * gw, d], out)
    }

    fn unpatchify(&self, patches: &Tensor<S>, gh: usize, gw: usize) -> Tensor<S> {
        let (p, c) = (self.patch, self.channels);
        let w = gw * p;
        let d = p * p * c;
        let mut out = vec![S::zero(); gh * p * w * c];
        for by in 0..gh {
            for bx in 0..gw {
                let src = patches.row(by * gw + bx);
                for dy in 0..p {
                    let row = (by * p + dy) * w + bx * p;
                    out[row * c..(row + p) * c].copy_from_slice(&src[dy * p * c..(dy + 1) * p * c]);
                }
            }
        }
        debug_assert_eq!(patches.cols(), d);
        Tensor::from_parts_unchecked(vec![gh * p, w, c], out)
    }
}

/// Seeded orthonormal matrix by modified Gram-Schmidt with reorthogonalization on Gaussian rows,
/// computed in 64-bit and rounded once.
fn orthonormal<S: Scalar>(n: usize, seed: u64) -> Tensor<S> {
    let mut rng = Rng::new(seed);
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
        let mut ok = true;
        for i in 0..n {
            // Two sweeps: one loses orthogonality on ill-conditioned draws.
            for j in (0..i).chain(0..i) {
                let (head, tail) = rows.split_at_mut(i);
                let dot: f64 = tail[0].iter().zip(&head[j]).map(|(a, b)| a * b).sum();
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor::from_fn(&[n, n], |k| S::of(rows[k / n][k % n]));
        }
    }
}
