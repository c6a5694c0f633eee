use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CATEGORIES: [&str; 5] = ["top", "bottom", "dress", "shoes", "bag"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels per token.
    pub width: usize,
    pub heads: usize,
    /// Number of (modulated resblock, semi-attention block) pairs.
    pub blocks: usize,
    /// Width of the timestep embedding and of each class-embedding row.
    pub emb_dim: usize,
    /// Token grid `(h, w)` of the denoising latent.
    pub latent_grid: [usize; 2],
    /// Pseudo-VAE patch edge in pixels.
    pub patch: usize,
    pub image_channels: usize,
    /// Ordered category table; also the canonical reference order.
    pub categories: Vec<String>,
    /// Diffusion training steps `T`.
    pub t_max: usize,
    /// `false` runs references on a shared zero embedding and drops the table.
    pub class_embedding: bool,
    /// Seed of the pseudo-VAE basis.
    pub vae_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            blocks: 2,
            emb_dim: 64,
            latent_grid: [16, 12],
            patch: 2,
            image_channels: 1,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            t_max: 100,
            class_embedding: true,
            vae_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return bad(format!("emb_dim {} must be even and positive", self.emb_dim));
        }
        if !self.width.is_multiple_of(4) {
            return bad(format!("width {} must be divisible by 4 for 2-d positions", self.width));
        }
        if self.latent_grid.contains(&0) {
            return bad("latent_grid dimensions must be positive".into());
        }
        if self.patch == 0 || self.image_channels == 0 {
            return bad("patch and image_channels must be positive".into());
        }
        if self.categories.is_empty() {
            return bad("category table is empty".into());
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return bad(format!("category {c:?} listed twice"));
            }
        }
        if self.t_max < 2 {
            return bad("t_max must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Latent channels per token, `patch² · image_channels`.
    pub fn latent_channels(&self) -> usize {
        self.patch * self.patch * self.image_channels
    }

    /// Channels of a denoiser input token: noisy latent, mask, composite.
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels() + 1
    }

    pub fn n_x(&self) -> usize {
        self.latent_grid[0] * self.latent_grid[1]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.latent_grid[0] * self.patch,
            self.latent_grid[1] * self.patch,
            self.image_channels,
        ]
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, e, l) = (self.width, self.emb_dim, self.latent_channels());
        let input = self.input_channels() * d + d;
        let time = 2 * (e * e + e);
        let table = if self.class_embedding { self.categories.len() * e } else { 0 };
        let block = 2 * d // norm before the resblock
            + 2 * (e * d + d) // scale and shift projections
            + d * d + d // mixer
            + 2 * d // norm before attention
            + 4 * d * d; // q, k, v, o
        let output = 2 * d + d * l + l;
        input + time + table + self.blocks * block + output
    }
}
