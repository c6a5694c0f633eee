use std::path::Path;
use std::process::{Command, Output};

use fastfit_core::benchkit::load_report;
use fastfit_core::sampler::ExecMode;

const SMALL: &str = r#"{"model": {"width": 16, "heads": 2, "blocks": 1, "emb_dim": 16, "latent_grid": [8, 4]},
    "train": {"ref_grid": [2, 2], "pool": 16, "eval_samples": 2, "eval_every": 4},
    "bench": {"references": 2, "steps": 4}, "seed": 11}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn fastfit(dir: &Path, args: &[&str]) -> Output {
    fastfit_env(dir, args, None)
}

fn fastfit_env(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fastfit"));
    cmd.arg("--config").arg(dir.join("small.json")).args(args).current_dir(dir);
    match seed {
        Some(s) => cmd.env("FASTFIT_SEED", s),
        None => cmd.env_remove("FASTFIT_SEED"),
    };
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_exit_codes() {
    let dir = setup();
    let ok = fastfit(dir.path(), &["verify", "--configs", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("all suites passed"));
    let broken = fastfit(dir.path(), &["verify", "--configs", "2", "--break-mask"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stdout(&broken).contains("FAIL"));
}

#[test]
fn bad_configs_exit_two() {
    let dir = setup();
    std::fs::write(dir.path().join("typo.json"), r#"{"modle": {}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fastfit"))
        .args(["--config", "typo.json", "sample"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));

    let missing = Command::new(env!("CARGO_BIN_EXE_fastfit"))
        .args(["--config", "nope.json", "verify"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let seed = fastfit_env(dir.path(), &["sample"], Some("not-a-number"));
    assert_eq!(seed.status.code(), Some(2));
}

#[test]
fn bench_rows_follow_the_mode_flag() {
    let dir = setup();
    let one = fastfit(dir.path(), &["bench", "--mode", "cached", "--out", "one.csv"]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let csv = std::fs::read_to_string(dir.path().join("one.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,runs,mean_s,stdev_s,flops,ratio");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("cached,10,"));

    let all = fastfit(dir.path(), &["bench", "--out", "all.json"]);
    assert!(all.status.success(), "{}", String::from_utf8_lossy(&all.stderr));
    let text = std::fs::read_to_string(dir.path().join("all.json")).unwrap();
    let report = load_report(&text).unwrap();
    assert_eq!(report.modes.len(), 3);
    let cached = report.mode(ExecMode::Cached).unwrap();
    let joint = report.mode(ExecMode::UncachedJoint).unwrap();
    let full = report.mode(ExecMode::FullAttention).unwrap();
    let ratio = joint.flops as f64 / cached.flops as f64;
    assert!((report.analytical_ratio - ratio).abs() < 1e-12);
    assert!(full.flops > joint.flops);
    assert_eq!(serde_json::to_string_pretty(&report).unwrap(), text.trim_end());
    let table = stdout(&all);
    for label in ["w/o KV cache", "w/ full attention", "cached"] {
        assert!(table.contains(label), "{table}");
    }
}

#[test]
fn sampling_is_repeatable_and_records_the_mode_gap() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = fastfit(dir.path(), &["sample", "--f64", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.z0.bin"), read("b.z0.bin"));
    assert_eq!(read("a.image.bin"), read("b.image.bin"));
    let meta: serde_json::Value = serde_json::from_slice(&read("a.json")).unwrap();
    assert_eq!(meta["dtype"], "f64");
    assert_eq!(meta["mode"], "cached");
    assert!(meta["cached_vs_uncached_max_abs_diff"].as_f64().unwrap() <= 1e-10);
    let z0_len = meta["z0_shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).product::<u64>();
    assert_eq!(read("a.z0.bin").len() as u64, 8 * z0_len);
}

#[test]
fn environment_seed_matches_the_flag() {
    let dir = setup();
    let run = |out: &str, args: &[&str], env: Option<&str>| {
        let mut full = args.to_vec();
        full.extend(["sample", "--out", out]);
        assert!(fastfit_env(dir.path(), &full, env).status.success());
        std::fs::read(dir.path().join(format!("{out}.z0.bin"))).unwrap()
    };
    let by_flag = run("flag", &["--seed", "5"], None);
    let by_env = run("env", &[], Some("5"));
    let from_config = run("cfg", &[], None);
    assert_eq!(by_flag, by_env);
    assert_ne!(by_flag, from_config);
}

#[test]
fn resumed_training_continues_the_same_curve() {
    let dir = setup();
    let train = |args: &[&str]| {
        let mut full = vec!["train-demo", "--recon-samples", "0", "--quiet"];
        full.extend(args);
        let o = fastfit(dir.path(), &full);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train(&["--steps", "8", "--out", "straight.bin"]);
    train(&["--steps", "4", "--out", "split.bin"]);
    train(&["--steps", "8", "--out", "split.bin", "--resume"]);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("straight.bin"), read("split.bin"));
    assert_eq!(read("straight.bin.curve.csv"), read("split.bin.curve.csv"));
    let summary: serde_json::Value = serde_json::from_slice(&read("split.bin.summary.json")).unwrap();
    assert_eq!(summary["steps"], 8);
}
