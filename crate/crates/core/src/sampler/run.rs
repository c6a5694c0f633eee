use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::condition::{pseudo_vae, PersonCondition};
use super::schedule::{cfg_combine, ddim_step, inference_timesteps, NoiseSchedule};
use crate::denoiser::{forward_denoise, forward_joint, MaskKind, Model, ReferenceItem};
use crate::error::{Error, Result};
use crate::graph::{Eager, KernelStats};
use crate::numkernel::{Scalar, Tensor};
use crate::refcache::{precompute_cache, ReferenceKVCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Reference keys/values computed once, X-only attention per step.
    Cached,
    /// Joint semi-attention pass over X and every reference, every step.
    #[serde(alias = "uncached")]
    UncachedJoint,
    /// Joint pass with an all-true mask.
    #[serde(alias = "full-attn")]
    FullAttention,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::Cached, ExecMode::UncachedJoint, ExecMode::FullAttention];

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Cached => "cached",
            ExecMode::UncachedJoint => "uncached-joint",
            ExecMode::FullAttention => "full-attention",
        }
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(ExecMode::Cached),
            "uncached" | "uncached-joint" => Ok(ExecMode::UncachedJoint),
            "full-attn" | "full-attention" => Ok(ExecMode::FullAttention),
            _ => Err(Error::ModeMismatch(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Runs the unconditional branch and blends with `guidance_scale`.
    pub classifier_free: bool,
    pub mode: ExecMode,
    /// Only `0` (deterministic) is supported.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_scale: 2.0,
            classifier_free: true,
            mode: ExecMode::Cached,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps == 0 || self.steps > t_max {
            return Err(Error::Config(format!("steps {} must lie in 1..={t_max}", self.steps)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be finite and ≥ 0", self.guidance_scale)));
        }
        if self.eta != 0.0 {
            return Err(Error::Config("only deterministic sampling (eta = 0) is supported".into()));
        }
        Ok(())
    }
}

/// Instrumentation of one sampling run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Per-item reference-branch invocations.
    pub reference_branch_calls: u64,
    /// Steps that recomputed reference features inside a joint pass.
    pub reference_recompute_steps: u64,
    /// Denoiser evaluations across both guidance branches.
    pub denoise_calls: u64,
    /// Work done building the cache.
    pub precompute: KernelStats,
    /// Work done in the step loop.
    pub loop_work: KernelStats,
    pub cache_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<S: Scalar> {
    pub z0: Tensor<S>,
    /// `H × W × c` image.
    pub decoded: Tensor<S>,
    pub timesteps: Vec<usize>,
    pub stats: SampleStats,
    pub precompute_seconds: f64,
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Denoises `z_T` into `z_0` in the configured mode and decodes it.
pub fn sample<S: Scalar>(
    model: &Model<S>,
    z_t: &Tensor<S>,
    person: &PersonCondition<S>,
    items: &[ReferenceItem<S>],
    config: &SamplerConfig,
) -> Result<SampleOutput<S>> {
    let start = Instant::now();
    config.validate(model.cfg.t_max)?;
    match config.mode {
        ExecMode::Cached => {
            let cache = precompute_cache(model, items)?;
            let precompute_seconds = start.elapsed().as_secs_f64();
            let mut stats = SampleStats {
                reference_branch_calls: cache.categories().len() as u64,
                precompute: cache.build_stats(),
                ..SampleStats::default()
            };
            let mut out = run_loop(model, z_t, person, config, &mut stats, Branch::Cached(&cache))?;
            out.precompute_seconds = precompute_seconds;
            out.total_seconds = start.elapsed().as_secs_f64();
            Ok(out)
        }
        ExecMode::UncachedJoint | ExecMode::FullAttention => {
            let kind = if config.mode == ExecMode::FullAttention {
                MaskKind::Full
            } else {
                MaskKind::Semi
            };
            crate::denoiser::canonical_order(&model.cfg, items)?;
            let mut stats = SampleStats::default();
            let mut out = run_loop(model, z_t, person, config, &mut stats, Branch::Joint(items, kind))?;
            out.total_seconds = start.elapsed().as_secs_f64();
            Ok(out)
        }
    }
}

/// Cached-mode sampling against a cache built elsewhere, possibly shared by
/// concurrent requests.
pub fn sample_with_cache<S: Scalar>(
    model: &Model<S>,
    z_t: &Tensor<S>,
    person: &PersonCondition<S>,
    cache: &ReferenceKVCache<S>,
    config: &SamplerConfig,
) -> Result<SampleOutput<S>> {
    let start = Instant::now();
    config.validate(model.cfg.t_max)?;
    if config.mode != ExecMode::Cached {
        return Err(Error::ModeMismatch(format!("a cache was supplied to {} mode", config.mode.name())));
    }
    if cache.layers().len() != model.cfg.blocks {
        return Err(Error::LayerMismatch {
            expected: model.cfg.blocks,
            got: cache.layers().len(),
        });
    }
    let mut stats = SampleStats::default();
    let mut out = run_loop(model, z_t, person, config, &mut stats, Branch::Cached(cache))?;
    out.total_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

enum Branch<'a, S: Scalar> {
    Cached(&'a ReferenceKVCache<S>),
    Joint(&'a [ReferenceItem<S>], MaskKind),
}

fn run_loop<S: Scalar>(
    model: &Model<S>,
    z_t: &Tensor<S>,
    person: &PersonCondition<S>,
    config: &SamplerConfig,
    stats: &mut SampleStats,
    branch: Branch<'_, S>,
) -> Result<SampleOutput<S>> {
    let cfg = &model.cfg;
    let schedule = NoiseSchedule::linear(cfg.t_max)?;
    let timesteps = inference_timesteps(cfg.t_max, config.steps)?;
    if z_t.shape() != [cfg.n_x(), cfg.latent_channels()] {
        return Err(Error::shape("z_T", format!("{:?}", z_t.shape())));
    }
    if let Branch::Cached(cache) = &branch {
        stats.cache_fingerprint = Some(cache.fingerprint().to_string());
    }
    let mut g = Eager::new();
    let mut z = z_t.clone();
    let mut step_seconds = Vec::with_capacity(timesteps.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let step_start = Instant::now();
        let x = person.input_tokens(&z)?;
        let eps_cond = match &branch {
            Branch::Cached(cache) => forward_denoise(&mut g, cfg, &model.params, &x, t, cache.layers())?,
            Branch::Joint(items, kind) => {
                if !items.is_empty() {
                    stats.reference_recompute_steps += 1;
                }
                forward_joint(&mut g, cfg, &model.params, &x, t, items, *kind)?.eps
            }
        };
        stats.denoise_calls += 1;
        let eps = if config.classifier_free {
            let eps_uncond = match &branch {
                Branch::Cached(_) => forward_denoise(&mut g, cfg, &model.params, &x, t, &[])?,
                Branch::Joint(_, kind) => forward_joint(&mut g, cfg, &model.params, &x, t, &[], *kind)?.eps,
            };
            stats.denoise_calls += 1;
            cfg_combine(&eps_cond, &eps_uncond, config.guidance_scale)?
        } else {
            eps_cond
        };
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        z = ddim_step(&z, &eps, t, t_prev, &schedule)?;
        step_seconds.push(step_start.elapsed().as_secs_f64());
    }
    stats.loop_work = g.stats;
    let decoded = pseudo_vae::<S>(cfg).decode(&z, cfg.latent_grid)?;
    Ok(SampleOutput {
        z0: z,
        decoded,
        timesteps,
        stats: stats.clone(),
        precompute_seconds: 0.0,
        step_seconds,
        total_seconds: 0.0,
    })
}
