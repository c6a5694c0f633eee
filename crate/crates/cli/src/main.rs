use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fastfit_cli::commands::{self, BenchArgs, SampleArgs, TrainArgs};
use fastfit_cli::config::{RunConfig, SEED_ENV};
use fastfit_cli::verify::{format_line, VerifyOptions};
use fastfit_cli::exit_code;
use fastfit_core::benchkit::CountingAlloc;
use fastfit_core::sampler::ExecMode;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Cacheable reference conditioning: verification, benchmarks, a training
/// demo and sampling.
#[derive(Parser)]
#[command(name = "fastfit", version)]
struct Cli {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cached,
    Uncached,
    FullAttn,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<ExecMode> {
        match self {
            ModeArg::Cached => vec![ExecMode::Cached],
            ModeArg::Uncached => vec![ExecMode::UncachedJoint],
            ModeArg::FullAttn => vec![ExecMode::FullAttention],
            ModeArg::All => ExecMode::ALL.to_vec(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites in 64-bit; exit 1 if any fails.
    Verify {
        /// Weights to verify instead of fresh random ones.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Random configurations in the losslessness suite.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        /// Let the first reference read X (negative control).
        #[arg(long)]
        break_mask: bool,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time the execution modes and write a report.
    Bench {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Concurrent cached requests for the throughput measurement.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Report path; `.json`, `.csv` or `.md`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Measure in 64-bit instead of 32-bit.
        #[arg(long)]
        f64: bool,
    },
    /// Train the demo denoiser; writes weights, loss curve and a summary.
    TrainDemo {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the weights (and optimizer state) at `paths.weights_in` or `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out samples for the reconstruction evaluation (0 skips it).
        #[arg(long, default_value_t = 16)]
        recon_samples: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Sample one synthetic request; writes raw tensors and JSON metadata.
    Sample {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Number of references (distinct random categories).
        #[arg(long, default_value_t = 3)]
        refs: usize,
        /// Output prefix.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        f64: bool,
    },
}

fn load_config(cli: &Cli) -> fastfit_core::Result<RunConfig> {
    let run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let run = run.with_env_seed(cli.seed.as_deref())?;
    run.validate()?;
    Ok(run)
}

fn run(cli: Cli) -> fastfit_core::Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Verify {
            weights,
            configs,
            break_mask,
            json,
        } => {
            let opts = VerifyOptions {
                configs,
                break_mask,
                seed: cfg.seed.unwrap_or(0),
                ..VerifyOptions::default()
            };
            let weights = weights.or_else(|| cfg.paths.weights_in.clone());
            let results = commands::cmd_verify(&cfg, weights.as_deref(), &opts)?;
            for r in &results {
                println!("{}", format_line(r));
            }
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&results)?)?;
            }
            let ok = results.iter().all(|r| r.passed);
            println!("{}", if ok { "all suites passed" } else { "verification FAILED" });
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Bench {
            mode,
            runs,
            warmup,
            threads,
            weights,
            out,
            f64,
        } => {
            let args = BenchArgs {
                modes: mode.map(ModeArg::modes),
                runs,
                warmup,
                threads,
                out,
                f64,
            };
            let weights = weights.or_else(|| cfg.paths.weights_in.clone());
            let (report, table) = commands::cmd_bench(&cfg, weights.as_deref(), &args)?;
            print!("{table}");
            if let Some(t) = &report.throughput {
                println!(
                    "throughput: {} requests on {} threads, {:.2} req/s",
                    t.requests, t.threads, t.requests_per_s
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainDemo {
            steps,
            resume,
            out,
            recon_samples,
            quiet,
        } => {
            let s = commands::cmd_train_demo(
                &cfg,
                &TrainArgs {
                    steps,
                    resume,
                    out,
                    recon_samples,
                    quiet,
                },
            )?;
            println!(
                "eval loss {:.4} -> {:.4} (x{:.3}) after {} steps",
                s.initial_eval_loss, s.final_eval_loss, s.loss_ratio, s.steps
            );
            if let Some(r) = &s.reconstruction {
                println!(
                    "masked reconstruction MSE {:.4} -> {:.4} (x{:.3}); class routing followed {}/{}",
                    r.untrained, r.trained, r.ratio, r.routing.followed, r.routing.trials
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample {
            weights,
            mode,
            refs,
            out,
            f64,
        } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                match m.modes().as_slice() {
                    [one] => cfg.sampler.mode = *one,
                    _ => {
                        eprintln!("error: sample takes a single mode");
                        return Ok(ExitCode::from(2));
                    }
                }
            }
            let weights = weights.or_else(|| cfg.paths.weights_in.clone());
            let meta = commands::cmd_sample(&cfg, weights.as_deref(), &SampleArgs { refs, out, f64 })?;
            println!(
                "{} {} steps, refs {:?}, cached vs uncached max abs diff {:.3e}",
                meta.mode.name(),
                meta.steps,
                meta.references,
                meta.cached_vs_uncached_max_abs_diff
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
