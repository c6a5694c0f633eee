use super::*;
use crate::denoiser::{Model, ModelConfig};
use crate::error::Error;
use crate::refcache::precompute_cache;

fn small() -> ModelConfig {
    ModelConfig {
        width: 16,
        emb_dim: 16,
        heads: 2,
        blocks: 2,
        latent_grid: [4, 4],
        ..ModelConfig::default()
    }
}

fn run<S: crate::numkernel::Scalar>(
    model: &Model<S>,
    req: &Request<S>,
    mode: ExecMode,
    steps: usize,
) -> SampleOutput<S> {
    let cfg = SamplerConfig {
        steps,
        mode,
        ..SamplerConfig::default()
    };
    sample(model, &req.z_t, &req.person, &req.items, &cfg).unwrap()
}

#[test]
fn cached_and_joint_agree_for_every_reference_count() {
    let model = Model::<f64>::init(small(), 1).unwrap();
    for k in 0..=5 {
        let req = synthetic_request::<f64>(&model.cfg, k, [2, 3], 100 + k as u64).unwrap();
        for steps in [1, 5] {
            let a = run(&model, &req, ExecMode::Cached, steps);
            let b = run(&model, &req, ExecMode::UncachedJoint, steps);
            assert!(a.z0.max_abs_diff(&b.z0).unwrap() <= 1e-10, "k={k} steps={steps}");
        }
    }
}

#[test]
fn single_precision_agreement() {
    let model = Model::<f32>::init(small(), 2).unwrap();
    let req = synthetic_request::<f32>(&model.cfg, 4, [2, 3], 7).unwrap();
    let a = run(&model, &req, ExecMode::Cached, 20);
    let b = run(&model, &req, ExecMode::UncachedJoint, 20);
    assert!(a.z0.max_abs_diff(&b.z0).unwrap() <= 1e-5);
}

#[test]
fn full_attention_differs() {
    let model = Model::<f64>::init(small(), 3).unwrap();
    let req = synthetic_request::<f64>(&model.cfg, 3, [2, 3], 8).unwrap();
    let a = run(&model, &req, ExecMode::Cached, 5);
    let c = run(&model, &req, ExecMode::FullAttention, 5);
    assert!(a.z0.max_abs_diff(&c.z0).unwrap() > 1e-8);
}

#[test]
fn deterministic_per_mode() {
    let model = Model::<f64>::init(small(), 4).unwrap();
    let req = synthetic_request::<f64>(&model.cfg, 2, [2, 3], 9).unwrap();
    for mode in ExecMode::ALL {
        let a = run(&model, &req, mode, 5);
        let b = run(&model, &req, mode, 5);
        assert_eq!(a.z0.to_le_bytes(), b.z0.to_le_bytes());
        assert_eq!(a.decoded.shape(), &[8, 8, 1]);
    }
}

#[test]
fn reference_work_counters() {
    let model = Model::<f64>::init(small(), 5).unwrap();
    let req = synthetic_request::<f64>(&model.cfg, 3, [2, 3], 10).unwrap();
    let one = run(&model, &req, ExecMode::Cached, 1);
    let twenty = run(&model, &req, ExecMode::Cached, 20);
    assert_eq!(twenty.stats.reference_branch_calls, 3);
    assert_eq!(twenty.stats.reference_recompute_steps, 0);
    assert_eq!(one.stats.precompute, twenty.stats.precompute);
    assert_eq!(twenty.stats.denoise_calls, 40);

    let joint = run(&model, &req, ExecMode::UncachedJoint, 20);
    assert_eq!(joint.stats.reference_branch_calls, 0);
    assert_eq!(joint.stats.reference_recompute_steps, 20);
    assert!(joint.stats.loop_work.multiply_adds > twenty.stats.loop_work.multiply_adds);
}

#[test]
fn shared_cache_is_untouched_and_equivalent() {
    let model = Model::<f64>::init(small(), 6).unwrap();
    let req = synthetic_request::<f64>(&model.cfg, 5, [2, 3], 11).unwrap();
    let cache = precompute_cache(&model, &req.items).unwrap();
    let before = cache.content_hash();
    let cfg = SamplerConfig::default();
    let a = sample_with_cache(&model, &req.z_t, &req.person, &cache, &cfg).unwrap();
    assert_eq!(cache.content_hash(), before);
    let b = run(&model, &req, ExecMode::Cached, 20);
    assert_eq!(a.z0, b.z0);
    assert_eq!(a.stats.cache_fingerprint.as_deref(), Some(cache.fingerprint()));

    let wrong = SamplerConfig {
        mode: ExecMode::UncachedJoint,
        ..cfg
    };
    assert!(matches!(
        sample_with_cache(&model, &req.z_t, &req.person, &cache, &wrong),
        Err(Error::ModeMismatch(_))
    ));
}

#[test]
fn unconditional_zero_guidance_completes() {
    let model = Model::<f64>::init(small(), 7).unwrap();
    let req = synthetic_request::<f64>(&model.cfg, 0, [2, 3], 12).unwrap();
    let cfg = SamplerConfig {
        guidance_scale: 0.0,
        ..SamplerConfig::default()
    };
    let out = sample(&model, &req.z_t, &req.person, &[], &cfg).unwrap();
    assert!(out.z0.is_finite());
    assert_eq!(out.timesteps.len(), 20);
}

#[test]
fn config_checks() {
    let c = SamplerConfig {
        steps: 101,
        ..SamplerConfig::default()
    };
    assert!(c.validate(100).is_err());
    let c = SamplerConfig {
        guidance_scale: -1.0,
        ..SamplerConfig::default()
    };
    assert!(c.validate(100).is_err());
    let c = SamplerConfig {
        eta: 0.5,
        ..SamplerConfig::default()
    };
    assert!(c.validate(100).is_err());
    assert_eq!("uncached".parse::<ExecMode>().unwrap(), ExecMode::UncachedJoint);
    let m: ExecMode = serde_json::from_str("\"full-attn\"").unwrap();
    assert_eq!(m, ExecMode::FullAttention);
}
