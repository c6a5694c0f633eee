use super::*;
use crate::denoiser::{Model, ModelConfig};
use crate::sampler::{sample, synthetic_request, ExecMode, SamplerConfig};

fn small() -> ModelConfig {
    ModelConfig {
        width: 16,
        heads: 2,
        blocks: 2,
        emb_dim: 8,
        latent_grid: [4, 3],
        ..ModelConfig::default()
    }
}

#[test]
fn cost_model_matches_counted_work() {
    let cfg = small();
    let model = Model::<f64>::init(cfg.clone(), 1).unwrap();
    for (k, cf) in [(0, true), (1, false), (3, true), (5, true)] {
        let req = synthetic_request::<f64>(&cfg, k, [2, 3], 9).unwrap();
        let w = Workload {
            ref_lengths: req.items.iter().map(|i| i.tokens()).collect(),
            steps: 4,
            classifier_free: cf,
        };
        for mode in ExecMode::ALL {
            let sc = SamplerConfig {
                steps: 4,
                classifier_free: cf,
                mode,
                ..SamplerConfig::default()
            };
            let out = sample(&model, &req.z_t, &req.person, &req.items, &sc).unwrap();
            let f = flops(&cfg, &w, mode);
            assert_eq!(out.stats.precompute.multiply_adds, f.one_time, "k={k} {mode:?}");
            assert_eq!(out.stats.loop_work.multiply_adds, 4 * f.per_step, "k={k} {mode:?}");
        }
    }
}

#[test]
fn no_references_means_no_saving() {
    let cfg = ModelConfig::default();
    let w = Workload {
        ref_lengths: vec![],
        steps: 20,
        classifier_free: true,
    };
    let c = flops(&cfg, &w, ExecMode::Cached);
    let u = flops(&cfg, &w, ExecMode::UncachedJoint);
    assert_eq!(c, u);
    assert_eq!(analytical_speedup(&cfg, &w), 1.0);
}

#[test]
fn paper_shaped_workload_saves_work() {
    let cfg = ModelConfig::default();
    let w = Workload {
        ref_lengths: vec![cfg.n_x(); 5],
        steps: 20,
        classifier_free: true,
    };
    assert!(analytical_speedup(&cfg, &w) > 1.5);
    let full = flops(&cfg, &w, ExecMode::FullAttention).per_step;
    assert!(full > flops(&cfg, &w, ExecMode::UncachedJoint).per_step);
}

#[test]
fn cost_is_linear_in_steps_and_amortizes() {
    let cfg = ModelConfig::default();
    let mk = |steps| Workload {
        ref_lengths: vec![48, 96, 24],
        steps,
        classifier_free: true,
    };
    for mode in ExecMode::ALL {
        let a = flops(&cfg, &mk(10), mode);
        let b = flops(&cfg, &mk(20), mode);
        assert_eq!(b.total - a.total, 10 * a.per_step);
        assert_eq!(a.one_time, b.one_time);
    }
    let mut last = 0.0;
    for steps in [1, 2, 5, 10, 50] {
        let r = analytical_speedup(&cfg, &mk(steps));
        assert!(r > last);
        last = r;
    }
}

#[test]
fn formats_parse_and_reject() {
    assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
    assert_eq!(Format::from_path(std::path::Path::new("r.csv")).unwrap(), Format::Csv);
    assert!(matches!("xml".parse::<Format>(), Err(crate::Error::UnknownFormat(_))));
}

#[test]
fn bench_config_enforces_minimum_runs() {
    let b = BenchConfig {
        runs: 3,
        ..BenchConfig::default()
    };
    assert!(b.validate().is_err());
    assert!(BenchConfig::default().validate().is_ok());
}
