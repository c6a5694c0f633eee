//! Closed-form multiply-add counts of the matmul-bearing work: projections,
//! mixers, the embedding MLP, attention logits and attention-weighted
//! values. Normalization, activations and softmax are not counted.

use serde::{Deserialize, Serialize};

use crate::denoiser::ModelConfig;
use crate::sampler::ExecMode;

/// The request shape a cost is evaluated for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    /// Token count of each reference.
    pub ref_lengths: Vec<usize>,
    pub steps: usize,
    pub classifier_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    /// Paid once per request (cached mode only).
    pub one_time: u64,
    /// Paid every step, both guidance branches included.
    pub per_step: u64,
    pub total: u64,
}

fn embed_cost(cfg: &ModelConfig, rows: u64) -> u64 {
    rows * cfg.input_channels() as u64 * cfg.width as u64
}

/// Row-local work of one block on `rows` tokens sharing one embedding:
/// modulation projections, mixer and the q/k/v/o projections.
fn block_rowwise(cfg: &ModelConfig, rows: u64) -> u64 {
    let (d, e) = (cfg.width as u64, cfg.emb_dim as u64);
    2 * e * d + 5 * rows * d * d
}

fn attention(cfg: &ModelConfig, queries: u64, keys: u64) -> u64 {
    2 * queries * keys * cfg.width as u64
}

fn time_embed(cfg: &ModelConfig) -> u64 {
    2 * (cfg.emb_dim as u64).pow(2)
}

fn head(cfg: &ModelConfig, rows: u64) -> u64 {
    rows * (cfg.width * cfg.latent_channels()) as u64
}

/// One reference branch.
pub fn reference_branch(cfg: &ModelConfig, n_r: usize) -> u64 {
    let n = n_r as u64;
    embed_cost(cfg, n) + cfg.blocks as u64 * (block_rowwise(cfg, n) + attention(cfg, n, n))
}

/// One X-only denoiser pass attending over `n_X + Σ n_ri` keys.
pub fn x_step(cfg: &ModelConfig, ref_tokens: usize) -> u64 {
    let nx = cfg.n_x() as u64;
    let keys = nx + ref_tokens as u64;
    time_embed(cfg) + embed_cost(cfg, nx) + cfg.blocks as u64 * (block_rowwise(cfg, nx) + attention(cfg, nx, keys)) + head(cfg, nx)
}

/// One joint pass over `[X; R_1; …; R_K]`.
pub fn joint_step(cfg: &ModelConfig, ref_lengths: &[usize], full: bool) -> u64 {
    let nx = cfg.n_x() as u64;
    let sum: u64 = ref_lengths.iter().map(|&n| n as u64).sum();
    let l = nx + sum;
    let mut per_block = block_rowwise(cfg, nx);
    for &n in ref_lengths {
        per_block += block_rowwise(cfg, n as u64);
    }
    per_block += if full {
        attention(cfg, l, l)
    } else {
        attention(cfg, nx, l) + ref_lengths.iter().map(|&n| attention(cfg, n as u64, n as u64)).sum::<u64>()
    };
    time_embed(cfg) + embed_cost(cfg, l) + cfg.blocks as u64 * per_block + head(cfg, nx)
}

pub fn flops(cfg: &ModelConfig, w: &Workload, mode: ExecMode) -> Flops {
    let refs: usize = w.ref_lengths.iter().sum();
    let uncond = if w.classifier_free { x_step(cfg, 0) } else { 0 };
    let (one_time, cond) = match mode {
        ExecMode::Cached => (
            w.ref_lengths.iter().map(|&n| reference_branch(cfg, n)).sum(),
            x_step(cfg, refs),
        ),
        ExecMode::UncachedJoint => (0, joint_step(cfg, &w.ref_lengths, false)),
        ExecMode::FullAttention => (0, joint_step(cfg, &w.ref_lengths, true)),
    };
    let per_step = cond + uncond;
    Flops {
        one_time,
        per_step,
        total: one_time + w.steps as u64 * per_step,
    }
}

/// `total(uncached-joint) / total(cached)`.
pub fn analytical_speedup(cfg: &ModelConfig, w: &Workload) -> f64 {
    flops(cfg, w, ExecMode::UncachedJoint).total as f64 / flops(cfg, w, ExecMode::Cached).total as f64
}
