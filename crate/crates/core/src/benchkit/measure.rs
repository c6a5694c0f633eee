use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::alloc;
use super::cost::{analytical_speedup, flops, Workload};
use crate::denoiser::Model;
use crate::error::{Error, Result};
use crate::numkernel::{DType, Scalar};
use crate::refcache::precompute_cache;
use crate::sampler::{sample, sample_with_cache, synthetic_request, ExecMode, SamplerConfig};

/// Largest coefficient of variation a report may carry and stay valid.
pub const MAX_CV: f64 = 0.1;
/// Minimum timer ticks per measured step.
pub const MIN_TICKS_PER_STEP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub references: usize,
    /// Reference token grid; defaults to the latent grid, so that the
    /// references together hold `references · n_X` tokens.
    pub ref_grid: Option<[usize; 2]>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub classifier_free: bool,
    pub runs: usize,
    pub warmup: usize,
    pub modes: Vec<ExecMode>,
    pub seed: u64,
    /// Concurrent requests sharing one cache; `0` disables throughput mode.
    pub throughput_threads: usize,
    pub throughput_requests: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            references: 5,
            ref_grid: None,
            steps: 20,
            guidance_scale: 2.0,
            classifier_free: true,
            runs: 10,
            warmup: 3,
            modes: ExecMode::ALL.to_vec(),
            seed: 0,
            throughput_threads: 0,
            throughput_requests: 8,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 10 || self.warmup < 3 {
            return Err(Error::Config(format!(
                "need at least 10 runs and 3 warmups, got {} and {}",
                self.runs, self.warmup
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no modes to measure".into()));
        }
        Ok(())
    }

    fn sampler(&self, mode: ExecMode) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            classifier_free: self.classifier_free,
            mode,
            eta: 0.0,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub n_x: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: ExecMode,
    pub runs: usize,
    pub mean_s: f64,
    pub stdev_s: f64,
    pub cv: f64,
    pub step_mean_s: f64,
    pub precompute_mean_s: f64,
    pub one_time_flops: u64,
    pub step_flops: u64,
    pub flops: u64,
    /// Heap high-water above the pre-run level; absent without the
    /// counting allocator.
    pub peak_workspace_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub threads: usize,
    pub requests: usize,
    pub seconds: f64,
    pub requests_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub model: ModelSummary,
    pub dtype: DType,
    pub workload: Workload,
    pub warmup: usize,
    pub timer_tick_s: f64,
    pub modes: Vec<ModeReport>,
    /// Measured `uncached-joint / cached` mean time.
    pub measured_ratio: Option<f64>,
    /// `uncached-joint / cached` total multiply-adds.
    pub analytical_ratio: f64,
    /// Measured `full-attention / uncached-joint` per-step time.
    pub full_vs_uncached_step: Option<f64>,
    /// Every mode within the variation bound.
    pub valid: bool,
    pub throughput: Option<Throughput>,
}

impl BenchReport {
    pub fn mode(&self, mode: ExecMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Smallest positive difference between consecutive clock reads.
pub fn timer_tick() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Paired measurement: each round runs every mode once on the same request.
pub fn measure<S: Scalar>(model: &Model<S>, bench: &BenchConfig) -> Result<BenchReport> {
    bench.validate()?;
    let cfg = &model.cfg;
    let ref_grid = bench.ref_grid.unwrap_or(cfg.latent_grid);
    let req = synthetic_request::<S>(cfg, bench.references, ref_grid, bench.seed)?;
    let workload = Workload {
        ref_lengths: req.items.iter().map(|i| i.tokens()).collect(),
        steps: bench.steps,
        classifier_free: bench.classifier_free,
    };
    let tick = timer_tick();
    let tracking = alloc::is_active();

    for _ in 0..bench.warmup {
        for &mode in &bench.modes {
            sample(model, &req.z_t, &req.person, &req.items, &bench.sampler(mode))?;
        }
    }

    let n = bench.modes.len();
    let mut totals = vec![Vec::with_capacity(bench.runs); n];
    let mut steps = vec![Vec::with_capacity(bench.runs); n];
    let mut pre = vec![Vec::with_capacity(bench.runs); n];
    let mut peaks = vec![0usize; n];
    for _ in 0..bench.runs {
        for (i, &mode) in bench.modes.iter().enumerate() {
            let base = alloc::start_window();
            let out = sample(model, &req.z_t, &req.person, &req.items, &bench.sampler(mode))?;
            peaks[i] = peaks[i].max(alloc::window_peak(base));
            let step_mean = out.step_seconds.iter().sum::<f64>() / out.step_seconds.len() as f64;
            if step_mean < MIN_TICKS_PER_STEP * tick {
                return Err(Error::TimerResolution {
                    detail: format!(
                        "{} step takes {step_mean:.3e} s, under {MIN_TICKS_PER_STEP} ticks of {tick:.3e} s",
                        mode.name()
                    ),
                });
            }
            totals[i].push(out.total_seconds);
            steps[i].push(step_mean);
            pre[i].push(out.precompute_seconds);
        }
    }

    let modes: Vec<ModeReport> = bench
        .modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let (mean, sd) = mean_stdev(&totals[i]);
            let f = flops(cfg, &workload, mode);
            ModeReport {
                mode,
                runs: bench.runs,
                mean_s: mean,
                stdev_s: sd,
                cv: sd / mean,
                step_mean_s: mean_stdev(&steps[i]).0,
                precompute_mean_s: mean_stdev(&pre[i]).0,
                one_time_flops: f.one_time,
                step_flops: f.per_step,
                flops: f.total,
                peak_workspace_bytes: tracking.then_some(peaks[i] as u64),
            }
        })
        .collect();

    let find = |m: ExecMode| modes.iter().find(|r| r.mode == m);
    let measured_ratio = match (find(ExecMode::UncachedJoint), find(ExecMode::Cached)) {
        (Some(u), Some(c)) => Some(u.mean_s / c.mean_s),
        _ => None,
    };
    let full_vs_uncached_step = match (find(ExecMode::FullAttention), find(ExecMode::UncachedJoint)) {
        (Some(f), Some(u)) => Some(f.step_mean_s / u.step_mean_s),
        _ => None,
    };
    let valid = modes.iter().all(|m| m.cv <= MAX_CV);

    let throughput = if bench.throughput_threads > 0 {
        Some(throughput(model, bench, &req)?)
    } else {
        None
    };

    Ok(BenchReport {
        config: bench.clone(),
        model: ModelSummary {
            width: cfg.width,
            heads: cfg.heads,
            blocks: cfg.blocks,
            n_x: cfg.n_x(),
            params: cfg.param_count(),
        },
        dtype: S::DTYPE,
        analytical_ratio: analytical_speedup(cfg, &workload),
        workload,
        warmup: bench.warmup,
        timer_tick_s: tick,
        modes,
        measured_ratio,
        full_vs_uncached_step,
        valid,
        throughput,
    })
}

/// Many requests over one shared, immutable cache.
fn throughput<S: Scalar>(model: &Model<S>, bench: &BenchConfig, req: &crate::sampler::Request<S>) -> Result<Throughput> {
    let cache = precompute_cache(model, &req.items)?;
    let threads = bench.throughput_threads;
    let requests = bench.throughput_requests.max(threads);
    let cfg = bench.sampler(ExecMode::Cached);
    let start = Instant::now();
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (cache, cfg) = (&cache, &cfg);
                s.spawn(move || -> Result<()> {
                    for _ in (t..requests).step_by(threads) {
                        sample_with_cache(model, &req.z_t, &req.person, cache, cfg)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(Throughput {
        threads,
        requests,
        seconds,
        requests_per_s: requests as f64 / seconds,
    })
}
