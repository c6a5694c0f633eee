//! One line per acceptance criterion. Runs as a plain binary so the lines
//! always reach the output; exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fastfit_cli::commands::{cmd_train_demo, TrainArgs};
use fastfit_cli::verify::{self, VerifyOptions};
use fastfit_cli::RunConfig;
use fastfit_core::benchkit::{measure, BenchConfig, CountingAlloc};
use fastfit_core::denoiser::{DenoiserParams, Model, ModelConfig};
use fastfit_core::sampler::ExecMode;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const SPEEDUP_BAND: (f64, f64) = (1.3, 2.5);
const SPEEDUP_VS_FLOPS: f64 = 0.30;
const TRAIN_LOSS_RATIO: f64 = 0.2;
const RECON_RATIO: f64 = 0.5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, limit_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < limit_s;
    let passed = out.passed && in_time;
    println!(
        "[{}] {id}. {name}: {} ({secs:.1} s, limit {limit_s:.0} s{})",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        if in_time { "" } else { ", OVER TIME" }
    );
    passed
}

fn suites_outcome(results: &[verify::SuiteResult]) -> Outcome {
    Outcome {
        passed: results.iter().all(|r| r.passed),
        detail: results
            .iter()
            .map(|r| format!("{} {:.2e} (tol {:.0e})", r.name, r.max_deviation, r.tolerance))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn fresh() -> Model<f64> {
    Model::init(ModelConfig::default(), 0).unwrap()
}

fn c4_speedup() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::init(cfg.clone(), 0).unwrap();
    let bench = BenchConfig {
        references: 5,
        ref_grid: Some(cfg.latent_grid),
        steps: 20,
        classifier_free: true,
        ..BenchConfig::default()
    };
    let r = match measure(&model, &bench) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: format!("error: {e}"),
            }
        }
    };
    let measured = r.measured_ratio.unwrap();
    let analytical = r.analytical_ratio;
    let full = r.mode(ExecMode::FullAttention).unwrap().step_mean_s;
    let uncached = r.mode(ExecMode::UncachedJoint).unwrap().step_mean_s;
    let in_band = (SPEEDUP_BAND.0..=SPEEDUP_BAND.1).contains(&measured);
    let near = (measured / analytical - 1.0).abs() <= SPEEDUP_VS_FLOPS;
    let ordered = full >= uncached;
    let cvs: Vec<String> = r.modes.iter().map(|m| format!("{:.3}", m.cv)).collect();
    Outcome {
        passed: in_band && near && ordered && r.valid,
        detail: format!(
            "measured {measured:.3} in [{}, {}]: {in_band}; analytical {analytical:.3}, within ±{:.0}%: {near}; \
             full-attention step {:.2} ms ≥ uncached {:.2} ms: {ordered}; cv {cvs:?} ≤ 0.1: {}",
            SPEEDUP_BAND.0,
            SPEEDUP_BAND.1,
            SPEEDUP_VS_FLOPS * 100.0,
            full * 1e3,
            uncached * 1e3,
            r.valid
        ),
    }
}

fn c6_training(dir: &Path) -> Outcome {
    let run = RunConfig::default();
    let out = dir.join("trained.bin");
    let s = match cmd_train_demo(
        &run,
        &TrainArgs {
            steps: None,
            resume: false,
            out: Some(out.clone()),
            recon_samples: 16,
            quiet: true,
        },
    ) {
        Ok(s) => s,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: format!("error: {e}"),
            }
        }
    };
    let (cfg, params, _) = DenoiserParams::<f32>::load(&out).unwrap();
    let trained = Model::new(cfg, params.cast::<f64>()).unwrap();
    let lossless = verify::lossless(&trained, &VerifyOptions::default());
    let lossless_ok = lossless.iter().all(|r| r.passed);
    let loss_ok = s.loss_ratio <= TRAIN_LOSS_RATIO;
    let r = s.reconstruction.clone().expect("reconstruction was requested");
    let recon_ok = r.ratio <= RECON_RATIO;
    Outcome {
        passed: loss_ok && recon_ok && lossless_ok,
        detail: format!(
            "eval loss {:.4} -> {:.4} = x{:.3} (≤ {TRAIN_LOSS_RATIO}); masked reconstruction {:.4} -> {:.4} = x{:.3} (≤ {RECON_RATIO}); \
             trained model lossless {} (max {:.1e}/{:.1e}); class routing followed {}/{}",
            s.initial_eval_loss,
            s.final_eval_loss,
            s.loss_ratio,
            r.untrained,
            r.trained,
            r.ratio,
            lossless_ok,
            lossless[0].max_deviation,
            lossless[1].max_deviation,
            r.routing.followed,
            r.routing.trials
        ),
    }
}

fn fastfit(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fastfit"))
        .args(args)
        .current_dir(dir)
        .env_remove("FASTFIT_SEED")
        .output()
        .expect("binary runs")
}

/// JSON with every timing-like field removed.
fn strip_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|k, _| {
                !(k.ends_with("_s") || k.contains("seconds") || k == "timings" || k == "cv" || k == "timer_tick_s" || k.starts_with("peak") || k.starts_with("measured") || k.starts_with("full_vs") || k == "valid" || k == "throughput")
            });
            m.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

fn c8_determinism(dir: &Path) -> Outcome {
    let small = r#"{"model": {"width": 16, "heads": 2, "blocks": 1, "emb_dim": 16, "latent_grid": [8, 4]},
        "train": {"ref_grid": [2, 2], "pool": 16, "eval_samples": 2, "eval_every": 5},
        "bench": {"references": 3}, "seed": 11}"#;
    std::fs::write(dir.join("small.json"), small).unwrap();
    let mut mismatches = Vec::new();
    for round in 0..2 {
        let d = dir.join(format!("round{round}"));
        std::fs::create_dir_all(&d).unwrap();
        let cfg = dir.join("small.json");
        let cfg = cfg.to_str().unwrap();
        let runs: [&[&str]; 5] = [
            &["--config", cfg, "sample", "--out", "s32"],
            &["--config", cfg, "sample", "--f64", "--mode", "uncached", "--out", "s64"],
            &["--config", cfg, "train-demo", "--steps", "12", "--out", "w.bin", "--recon-samples", "2", "--quiet"],
            &["--config", cfg, "bench", "--runs", "10", "--warmup", "3", "--out", "bench.json"],
            &["--config", cfg, "verify", "--configs", "2", "--json", "verify.json"],
        ];
        for args in runs {
            let out = fastfit(args, &d);
            if !out.status.success() {
                mismatches.push(format!("{args:?} exited {:?}", out.status.code()));
            }
        }
    }
    let files = [
        "s32.z0.bin", "s32.image.bin", "s32.json", "s64.z0.bin", "s64.json", "w.bin", "w.bin.opt", "w.bin.curve.csv",
        "w.bin.summary.json", "bench.json", "verify.json",
    ];
    for f in files {
        let a = std::fs::read(dir.join("round0").join(f)).unwrap_or_default();
        let b = std::fs::read(dir.join("round1").join(f)).unwrap_or_default();
        let same = if f.ends_with(".json") {
            let parse = |x: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(x).unwrap_or(serde_json::Value::Null);
                strip_timings(&mut v);
                v
            };
            parse(&a) == parse(&b) && !a.is_empty()
        } else {
            a == b && !a.is_empty()
        };
        if !same {
            mismatches.push(f.to_string());
        }
    }
    Outcome {
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("{} artifacts of sample/train-demo/bench/verify identical across two runs (timings excluded)", files.len())
        } else {
            format!("differences: {mismatches:?}")
        },
    }
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let dir = tempfile::tempdir().unwrap();
    let model = fresh();
    let opts = VerifyOptions::default();
    let mut ok = Vec::new();
    println!("acceptance criteria");
    ok.push(criterion(1, "losslessness (20 configs, 20 steps)", 60.0, || {
        suites_outcome(&verify::lossless(&model, &opts))
    }));
    ok.push(criterion(2, "mask semantics", 10.0, || {
        let good = verify::mask_semantics(&model, &opts);
        let broken = verify::mask_semantics(
            &model,
            &VerifyOptions {
                break_mask: true,
                ..opts.clone()
            },
        );
        Outcome {
            passed: good.passed && !broken.passed,
            detail: format!(
                "isolation and zero weights hold: {}; corrupted mask detected: {}",
                good.passed, !broken.passed
            ),
        }
    }));
    ok.push(criterion(3, "timestep independence", 30.0, || {
        suites_outcome(&[verify::timestep_independence(&model, &opts)])
    }));
    ok.push(criterion(4, "speedup structure", 300.0, c4_speedup));
    ok.push(criterion(5, "gradient correctness", 120.0, || suites_outcome(&[verify::gradients(&opts)])));
    ok.push(criterion(6, "training demo", 900.0, || c6_training(dir.path())));
    ok.push(criterion(7, "parameter overhead", 1.0, || {
        suites_outcome(&[verify::parameter_overhead(&ModelConfig::default())])
    }));
    ok.push(criterion(8, "determinism", 60.0, || c8_determinism(dir.path())));
    let passed = ok.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
