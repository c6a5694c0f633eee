//! Weight-independent property suites, run in 64-bit (plus a 32-bit
//! losslessness pass).

use std::time::Instant;

use fastfit_core::autodiff::FiniteDiff;
use fastfit_core::denoiser::{forward_joint, DenoiserParams, MaskKind, Model, ModelConfig, SemiAttentionMask};
use fastfit_core::graph::Eager;
use fastfit_core::numkernel::{attention_forward, Rng, Scalar, Tensor};
use fastfit_core::refcache::precompute_cache;
use fastfit_core::sampler::{inference_timesteps, sample, synthetic_request, ExecMode, SamplerConfig};
use fastfit_core::traindemo::{example_loss, example_loss_and_grads, make_sample_with, prepare_example, TrainConfig};
use fastfit_core::Result;
use serde::{Deserialize, Serialize};

pub const LOSSLESS_TOL_F64: f64 = 1e-10;
pub const LOSSLESS_TOL_F32: f64 = 1e-5;
pub const TIMESTEP_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random (seed, K) configurations of the losslessness suite.
    pub configs: usize,
    pub steps: usize,
    pub ref_grid: [usize; 2],
    pub seed: u64,
    /// Negative control: run the mask suite with a mask that lets the
    /// first reference read X.
    pub break_mask: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            configs: 20,
            steps: 20,
            ref_grid: [8, 6],
            seed: 0,
            break_mask: false,
        }
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (max_deviation, passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (f64::NAN, false, format!("error: {e}")),
    };
    SuiteResult {
        name: name.into(),
        passed,
        max_deviation,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn sampler(steps: usize, mode: ExecMode, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        mode,
        seed,
        ..SamplerConfig::default()
    }
}

fn lossless_max_diff<S: Scalar>(model: &Model<S>, opts: &VerifyOptions) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..opts.configs {
        let seed = opts.seed.wrapping_add(i as u64);
        let k = i % (model.cfg.categories.len() + 1);
        let req = synthetic_request::<S>(&model.cfg, k, opts.ref_grid, seed)?;
        let run = |mode| sample(model, &req.z_t, &req.person, &req.items, &sampler(opts.steps, mode, seed));
        let a = run(ExecMode::Cached)?;
        let b = run(ExecMode::UncachedJoint)?;
        worst = worst.max(a.z0.max_abs_diff(&b.z0)?);
    }
    Ok(worst)
}

/// Cached and uncached-joint sampling agree.
pub fn lossless(model: &Model<f64>, opts: &VerifyOptions) -> Vec<SuiteResult> {
    let detail = format!("{} configs, {} steps, CFG on", opts.configs, opts.steps);
    vec![
        timed("lossless-f64", LOSSLESS_TOL_F64, || {
            let d = lossless_max_diff(model, opts)?;
            Ok((d, d <= LOSSLESS_TOL_F64, detail.clone()))
        }),
        timed("lossless-f32", LOSSLESS_TOL_F32, || {
            let d = lossless_max_diff(&model.cast::<f32>(), opts)?;
            Ok((d, d <= LOSSLESS_TOL_F32, detail.clone()))
        }),
    ]
}

fn perturb(t: &Tensor<f64>, rng: &mut Rng) -> Result<Tensor<f64>> {
    let noise = Tensor::from_fn(t.shape(), |_| rng.normal());
    t.zip_map(&noise, "perturb", |a, b| a + b)
}

/// Rows `[start, start + n)` of every per-layer feature map, for comparison.
fn segment_rows(features: &[Tensor<f64>], start: usize, n: usize) -> Result<Vec<Tensor<f64>>> {
    features.iter().map(|f| f.slice_rows(start, n)).collect()
}

/// Reference features ignore X and each other; disallowed attention weights
/// are exactly zero.
pub fn mask_semantics(model: &Model<f64>, opts: &VerifyOptions) -> SuiteResult {
    let kind = if opts.break_mask { MaskKind::Corrupted } else { MaskKind::Semi };
    timed("mask-semantics", 0.0, || {
        let cfg = &model.cfg;
        let mut worst = 0.0f64;
        let mut violations = Vec::new();
        for (trial, k) in [2usize, 3, 5].into_iter().enumerate() {
            let seed = opts.seed.wrapping_add(100 + trial as u64);
            let mut rng = Rng::new(seed);
            let req = synthetic_request::<f64>(cfg, k, opts.ref_grid, seed)?;
            let t = rng.range(0, cfg.t_max);
            let x = req.person.input_tokens(&req.z_t)?;
            let pass = |x: &Tensor<f64>, items: &[_]| forward_joint(&mut Eager::new(), cfg, &model.params, x, t, items, kind);
            let base = pass(&x, &req.items)?;
            let lengths = base.mask.segment_lengths().to_vec();
            let offsets: Vec<usize> = lengths.iter().scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            }).collect();

            // X perturbed: every reference segment unchanged
            let x2 = perturb(&x, &mut rng)?;
            let moved = pass(&x2, &req.items)?;
            for j in 1..lengths.len() {
                let a = segment_rows(&base.features, offsets[j], lengths[j])?;
                let b = segment_rows(&moved.features, offsets[j], lengths[j])?;
                for (fa, fb) in a.iter().zip(&b) {
                    let d = fa.max_abs_diff(fb)?;
                    worst = worst.max(d);
                    if fa != fb {
                        violations.push(format!("K={k}: reference {j} changed with X"));
                    }
                }
            }

            // one reference perturbed: the others unchanged
            // (references sit in category order inside the pass)
            let mut order: Vec<usize> = (0..req.items.len()).collect();
            order.sort_by_key(|&i| req.items[i].category);
            let mut items2 = req.items.clone();
            let target = order[0];
            items2[target].latent = perturb(&items2[target].latent, &mut rng)?;
            let moved = pass(&x, &items2)?;
            for j in 2..lengths.len() {
                let a = segment_rows(&base.features, offsets[j], lengths[j])?;
                let b = segment_rows(&moved.features, offsets[j], lengths[j])?;
                for (fa, fb) in a.iter().zip(&b) {
                    worst = worst.max(fa.max_abs_diff(fb)?);
                    if fa != fb {
                        violations.push(format!("K={k}: reference {j} changed with reference 1"));
                    }
                }
            }

            // attention weights the kernel actually uses, scattered densely
            let semi = SemiAttentionMask::new(&lengths)?;
            let n = semi.len();
            for kv in &base.kv {
                let q = Tensor::from_fn(&[n, cfg.width], |_| rng.normal());
                let spans = base.mask.spans();
                let (_, probs) = attention_forward(&q, &kv.k, &kv.v, cfg.heads, &spans, true)?;
                let probs = probs.expect("kept");
                for h in 0..cfg.heads {
                    let mut dense = vec![0.0; n * n];
                    for (s, span) in spans.iter().enumerate() {
                        let block = &probs[h * spans.len() + s];
                        let nk = span.keys.len();
                        for (qi, qq) in span.queries.clone().enumerate() {
                            for (ki, kk) in span.keys.clone().enumerate() {
                                dense[qq * n + kk] = block[qi * nk + ki];
                            }
                        }
                    }
                    let leaked = (0..n * n)
                        .filter(|&i| !semi.allowed(i / n, i % n))
                        .map(|i| dense[i])
                        .fold(0.0, f64::max);
                    worst = worst.max(leaked);
                    if leaked != 0.0 {
                        violations.push(format!("K={k}: nonzero disallowed attention weights"));
                    }
                }
            }
        }
        let detail = if violations.is_empty() {
            "3 requests (K = 2, 3, 5), all layers".to_string()
        } else {
            let mut kinds = violations.clone();
            kinds.sort();
            kinds.dedup();
            format!("{} violations: {}", violations.len(), kinds.join("; "))
        };
        Ok((worst, violations.is_empty(), detail))
    })
}

/// Reference keys/values computed once equal the reference segments of the
/// joint pass at every sampled step.
pub fn timestep_independence(model: &Model<f64>, opts: &VerifyOptions) -> SuiteResult {
    timed("timestep-independence", TIMESTEP_TOL, || {
        let cfg = &model.cfg;
        let mut worst = 0.0f64;
        let steps = inference_timesteps(cfg.t_max, opts.steps)?;
        for k in [1usize, 3, 5] {
            let seed = opts.seed.wrapping_add(200 + k as u64);
            let req = synthetic_request::<f64>(cfg, k, opts.ref_grid, seed)?;
            let cache = precompute_cache(model, &req.items)?;
            let x = req.person.input_tokens(&req.z_t)?;
            for &t in &steps {
                let pass = forward_joint(&mut Eager::new(), cfg, &model.params, &x, t, &req.items, MaskKind::Semi)?;
                let lengths = pass.mask.segment_lengths();
                for (l, kv) in pass.kv.iter().enumerate() {
                    let mut start = lengths[0];
                    for (j, &n) in lengths[1..].iter().enumerate() {
                        let c = &cache.layers()[l][j];
                        worst = worst.max(kv.k.slice_rows(start, n)?.max_abs_diff(&c.k)?);
                        worst = worst.max(kv.v.slice_rows(start, n)?.max_abs_diff(&c.v)?);
                        start += n;
                    }
                }
            }
        }
        Ok((
            worst,
            worst <= TIMESTEP_TOL,
            format!("K = 1, 3, 5 at {} timesteps", steps.len()),
        ))
    })
}

/// The 1-block, width-16 model used by the gradient suite.
pub fn gradient_model() -> ModelConfig {
    ModelConfig {
        width: 16,
        heads: 2,
        blocks: 1,
        emb_dim: 16,
        latent_grid: [8, 4],
        ..ModelConfig::default()
    }
}

/// Training-loss gradients against central differences.
pub fn gradients(opts: &VerifyOptions) -> SuiteResult {
    timed("gradients", GRAD_TOL, || {
        let cfg = gradient_model();
        let tc = TrainConfig {
            ref_grid: [2, 2],
            seed: opts.seed,
            ..TrainConfig::default()
        };
        let params = DenoiserParams::<f64>::init(&cfg, opts.seed)?;
        let schedule = fastfit_core::sampler::NoiseSchedule::linear(cfg.t_max)?;
        let mut rng = Rng::new(opts.seed);
        let s = make_sample_with::<f64>(&mut rng, &cfg, &tc, 3)?;
        let ex = prepare_example(&schedule, &s, &mut rng, 0.0)?;
        let (_, grads) = example_loss_and_grads(&cfg, &params, &ex)?;
        let named = params.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let flat: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let analytic: Vec<Tensor<f64>> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
        let report = FiniteDiff {
            seed: opts.seed,
            ..FiniteDiff::default()
        }
        .check(
            |vals| {
                let mut p = params.clone();
                for (dst, src) in p.values_mut().into_iter().zip(vals) {
                    *dst = src.clone();
                }
                example_loss(&cfg, &p, &ex)
            },
            &names,
            &flat,
            &analytic,
        )?;
        let worst = report.max_rel_err();
        let detail = format!(
            "{} tensors, {} coordinates (min(64, size) per tensor)",
            report.params.len(),
            report.coords_checked()
        );
        Ok((worst, worst <= GRAD_TOL, detail))
    })
}

/// Closed-form parameter count, and the mechanism's only parameters are
/// the class table.
pub fn parameter_overhead(cfg: &ModelConfig) -> SuiteResult {
    timed("parameter-overhead", 0.0, || {
        let with = DenoiserParams::<f64>::init(cfg, 0)?;
        let without_cfg = ModelConfig {
            class_embedding: false,
            ..cfg.clone()
        };
        let without = DenoiserParams::<f64>::init(&without_cfg, 0)?;
        let expected = cfg.categories.len() * cfg.emb_dim;
        let overhead = with.param_count() as i64 - without.param_count() as i64;
        let names_with: Vec<String> = with.named().into_iter().map(|(n, _)| n).collect();
        let names_without: Vec<String> = without.named().into_iter().map(|(n, _)| n).collect();
        let extra: Vec<&String> = names_with.iter().filter(|n| !names_without.contains(n)).collect();
        let closed = with.param_count() == cfg.param_count() && without.param_count() == without_cfg.param_count();
        let ok = closed && overhead == expected as i64 && extra == [&"class_table".to_string()];
        let detail = format!(
            "{} params ({} without class table), overhead {overhead} = {} rows × {}, added tensors {extra:?}",
            with.param_count(),
            without.param_count(),
            cfg.categories.len(),
            cfg.emb_dim
        );
        Ok(((overhead - expected as i64).abs() as f64, ok, detail))
    })
}

/// Every suite, in a fixed order.
pub fn run_all(model: &Model<f64>, opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut out = lossless(model, opts);
    out.push(mask_semantics(model, opts));
    out.push(timestep_independence(model, opts));
    out.push(gradients(opts));
    out.push(parameter_overhead(&model.cfg));
    out
}

pub fn format_line(r: &SuiteResult) -> String {
    format!(
        "{} {:<22} max dev {:.3e} (tol {:.0e})  {:.2}s  {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.max_deviation,
        r.tolerance,
        r.seconds,
        r.detail
    )
}
