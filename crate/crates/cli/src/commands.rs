use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fastfit_core::benchkit::{emit_report, measure, BenchReport, Format};
use fastfit_core::denoiser::{DenoiserParams, Model};
use fastfit_core::numkernel::{Scalar, Tensor};
use fastfit_core::sampler::{sample, synthetic_request, ExecMode};
use fastfit_core::traindemo::{class_routing, reconstruction_mse, RoutingCheck, Trainer};
use fastfit_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::verify::{self, SuiteResult, VerifyOptions};

pub const DEFAULT_WEIGHTS: &str = "fastfit-weights.bin";

/// Loaded weights if a path is given, fresh ones from `seed` otherwise.
pub fn load_model<S: Scalar>(run: &RunConfig, weights: Option<&Path>, seed: u64) -> Result<Model<S>> {
    match weights {
        Some(path) => {
            let (cfg, params, _) = DenoiserParams::<f32>::load(path)?;
            Model::new(cfg, params.cast())
        }
        None => Model::init(run.model.clone(), seed),
    }
}

fn seed_of(run: &RunConfig) -> u64 {
    run.seed.unwrap_or(0)
}

pub fn cmd_verify(run: &RunConfig, weights: Option<&Path>, opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    let model = load_model::<f64>(run, weights, seed_of(run))?;
    let opts = VerifyOptions {
        ref_grid: run.train.ref_grid,
        ..opts.clone()
    };
    Ok(verify::run_all(&model, &opts))
}

pub struct BenchArgs {
    pub modes: Option<Vec<ExecMode>>,
    pub runs: Option<usize>,
    pub warmup: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub f64: bool,
}

pub fn cmd_bench(run: &RunConfig, weights: Option<&Path>, args: &BenchArgs) -> Result<(BenchReport, String)> {
    let mut bench = run.bench.clone();
    if let Some(m) = &args.modes {
        bench.modes = m.clone();
    }
    bench.runs = args.runs.unwrap_or(bench.runs);
    bench.warmup = args.warmup.unwrap_or(bench.warmup);
    bench.throughput_threads = args.threads.unwrap_or(bench.throughput_threads);
    bench.validate()?;
    let report = if args.f64 {
        measure(&load_model::<f64>(run, weights, seed_of(run))?, &bench)?
    } else {
        measure(&load_model::<f32>(run, weights, seed_of(run))?, &bench)?
    };
    if let Some(out) = args.out.as_ref().or(run.paths.report_out.as_ref()) {
        let text = emit_report(&report, Format::from_path(out)?)?;
        std::fs::write(out, text)?;
    }
    let table = emit_report(&report, Format::Markdown)?;
    Ok((report, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub loss_ratio: f64,
    /// Absent when the evaluation was skipped.
    pub reconstruction: Option<Reconstruction>,
    pub seconds: f64,
}

/// Masked-region reconstruction error before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub samples: usize,
    pub untrained: f64,
    pub trained: f64,
    pub ratio: f64,
    pub routing: RoutingCheck,
}

pub struct TrainArgs {
    pub steps: Option<usize>,
    pub resume: bool,
    pub out: Option<PathBuf>,
    /// Held-out samples for the reconstruction evaluation; `0` skips it.
    pub recon_samples: usize,
    pub quiet: bool,
}

pub fn curve_path(weights: &Path) -> PathBuf {
    with_suffix(weights, ".curve.csv")
}

pub fn summary_path(weights: &Path) -> PathBuf {
    with_suffix(weights, ".summary.json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    p.into()
}

/// Rows of an existing curve file before `step`.
fn curve_prefix(path: &Path, step: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step))
        .map(str::to_string)
        .collect())
}

pub fn cmd_train_demo(run: &RunConfig, args: &TrainArgs) -> Result<TrainSummary> {
    let start = Instant::now();
    let mut tc = run.train.clone();
    tc.steps = args.steps.unwrap_or(tc.steps);
    let out = args
        .out
        .clone()
        .or_else(|| run.paths.weights_out.clone())
        .unwrap_or_else(|| DEFAULT_WEIGHTS.into());
    let init = DenoiserParams::<f32>::init(&run.model, tc.seed)?;

    let (mut trainer, mut rows, initial) = if args.resume {
        let from = run.paths.weights_in.clone().unwrap_or_else(|| out.clone());
        let t = Trainer::<f32>::resume(&from, tc.clone())?;
        let rows = curve_prefix(&curve_path(&from), t.step)?;
        let prev: TrainSummary = serde_json::from_str(&std::fs::read_to_string(summary_path(&from))?)?;
        (t, rows, Some(prev.initial_eval_loss))
    } else {
        (Trainer::new(run.model.clone(), tc.clone(), init.clone())?, Vec::new(), None)
    };
    let first = trainer.step;
    let quiet = args.quiet;
    let final_eval = trainer.run_until(tc.steps, |p| {
        if let (Some(e), false) = (p.eval_loss, quiet) {
            eprintln!("step {:>5}  loss {:.4}  eval {:.4}", p.step, p.loss, e);
        }
    })?;
    let initial = match initial {
        Some(v) => v,
        None => match trainer.curve.first().and_then(|p| p.eval_loss) {
            Some(v) => v,
            None => trainer.eval_loss()?,
        },
    };
    trainer.save(&out)?;
    for line in trainer.curve_csv().lines().skip(1) {
        rows.push(line.to_string());
    }
    let mut csv = String::from("step,loss,eval_loss\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    std::fs::write(curve_path(&out), csv)?;
    debug_assert!(trainer.step >= first);

    let trained = Model::new(run.model.clone(), trainer.params.clone())?;
    let untrained = Model::new(run.model.clone(), init)?;
    let steps = run.sampler.steps;
    let reconstruction = if args.recon_samples > 0 {
        let untrained = reconstruction_mse(&untrained, &tc, args.recon_samples, steps)?;
        let trained_mse = reconstruction_mse(&trained, &tc, args.recon_samples, steps)?;
        Some(Reconstruction {
            samples: args.recon_samples,
            untrained,
            trained: trained_mse,
            ratio: trained_mse / untrained,
            routing: class_routing(&trained, &tc, args.recon_samples, steps)?,
        })
    } else {
        None
    };
    let summary = TrainSummary {
        steps: trainer.step,
        initial_eval_loss: initial,
        final_eval_loss: final_eval,
        loss_ratio: final_eval / initial,
        reconstruction,
        seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(summary_path(&out), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub dtype: fastfit_core::numkernel::DType,
    pub seed: u64,
    pub mode: ExecMode,
    pub steps: usize,
    pub guidance_scale: f64,
    pub references: Vec<String>,
    pub weights: Option<String>,
    pub model_id: String,
    pub z0_file: String,
    pub z0_shape: Vec<usize>,
    pub image_file: String,
    pub image_shape: Vec<usize>,
    /// Max |z0(cached) − z0(uncached-joint)| for this request.
    pub cached_vs_uncached_max_abs_diff: f64,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub precompute_s: f64,
    pub total_s: f64,
    pub mean_step_s: f64,
}

pub struct SampleArgs {
    pub refs: usize,
    pub out: Option<PathBuf>,
    pub f64: bool,
}

fn write_sample<S: Scalar>(run: &RunConfig, weights: Option<&Path>, args: &SampleArgs, prefix: &Path) -> Result<SampleMeta> {
    let seed = run.sampler.seed;
    let model = load_model::<S>(run, weights, seed_of(run))?;
    let req = synthetic_request::<S>(&model.cfg, args.refs, run.train.ref_grid, seed)?;
    let cfg = &run.sampler;
    let out = sample(&model, &req.z_t, &req.person, &req.items, cfg)?;
    let other_mode = if cfg.mode == ExecMode::Cached {
        ExecMode::UncachedJoint
    } else {
        ExecMode::Cached
    };
    let other = sample(
        &model,
        &req.z_t,
        &req.person,
        &req.items,
        &fastfit_core::sampler::SamplerConfig {
            mode: other_mode,
            ..cfg.clone()
        },
    )?;
    let (cached, uncached) = match cfg.mode {
        ExecMode::Cached => (&out.z0, &other.z0),
        _ => (&other.z0, &out.z0),
    };
    let diff = cached.max_abs_diff(uncached)?;

    let name = |suffix: &str| with_suffix(prefix, suffix);
    let write = |path: &Path, t: &Tensor<S>| std::fs::File::create(path)?.write_all(&t.to_le_bytes());
    write(&name(".z0.bin"), &out.z0)?;
    write(&name(".image.bin"), &out.decoded)?;
    let file_name = |p: PathBuf| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mean_step = out.step_seconds.iter().sum::<f64>() / out.step_seconds.len().max(1) as f64;
    let meta = SampleMeta {
        dtype: S::DTYPE,
        seed,
        mode: cfg.mode,
        steps: cfg.steps,
        guidance_scale: cfg.guidance_scale,
        references: req.items.iter().map(|i| model.cfg.categories[i.category].clone()).collect(),
        weights: weights.map(|p| p.display().to_string()),
        model_id: model.id().to_string(),
        z0_file: file_name(name(".z0.bin")),
        z0_shape: out.z0.shape().to_vec(),
        image_file: file_name(name(".image.bin")),
        image_shape: out.decoded.shape().to_vec(),
        cached_vs_uncached_max_abs_diff: diff,
        timings: Timings {
            precompute_s: out.precompute_seconds,
            total_s: out.total_seconds,
            mean_step_s: mean_step,
        },
    };
    std::fs::write(name(".json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn cmd_sample(run: &RunConfig, weights: Option<&Path>, args: &SampleArgs) -> Result<SampleMeta> {
    let prefix = args
        .out
        .clone()
        .or_else(|| run.paths.sample_out.clone())
        .unwrap_or_else(|| "fastfit-sample".into());
    if args.refs > run.model.categories.len() {
        return Err(Error::Config(format!(
            "{} references requested, {} categories exist",
            args.refs,
            run.model.categories.len()
        )));
    }
    if args.f64 {
        write_sample::<f64>(run, weights, args, &prefix)
    } else {
        write_sample::<f32>(run, weights, args, &prefix)
    }
}
