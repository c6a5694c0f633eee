use super::*;
use crate::autodiff::Tape;
use crate::error::Error;
use crate::graph::{Eager, Graph};
use crate::numkernel::{layer_norm, matmul, Rng, Tensor};

fn cfg16() -> ModelConfig {
    ModelConfig {
        width: 16,
        emb_dim: 8,
        heads: 2,
        blocks: 2,
        latent_grid: [4, 3],
        ..ModelConfig::default()
    }
}

fn x_tokens(cfg: &ModelConfig, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(&[cfg.n_x(), cfg.input_channels()], |_| rng.uniform(-1.0, 1.0))
}

fn item(cat: usize, grid: [usize; 2], rng: &mut Rng) -> ReferenceItem<f64> {
    ReferenceItem {
        latent: Tensor::from_fn(&[grid[0] * grid[1], 4], |_| rng.uniform(-1.0, 1.0)),
        grid,
        category: cat,
    }
}

fn items(rng: &mut Rng) -> Vec<ReferenceItem<f64>> {
    vec![item(4, [2, 2], rng), item(0, [3, 2], rng), item(2, [1, 3], rng)]
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [ModelConfig::default(), cfg16()] {
        let p = DenoiserParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(p.param_count(), cfg.param_count());
        let without = ModelConfig {
            class_embedding: false,
            ..cfg.clone()
        };
        assert_eq!(cfg.param_count() - without.param_count(), 5 * cfg.emb_dim);
        assert_eq!(DenoiserParams::<f32>::init(&without, 0).unwrap().param_count(), without.param_count());
    }
}

#[test]
fn config_validation() {
    let mut c = cfg16();
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = cfg16();
    c.blocks = 0;
    assert!(c.validate().is_err());
    let json = r#"{"width": 16, "heads": 2, "bogus": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let json = r#"{"width": 32, "heads": 2}"#;
    let c: ModelConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.width, 32);
    assert_eq!(c.categories.len(), 5);
}

#[test]
fn resblock_identity_and_modulation() {
    let cfg = cfg16();
    let mut rng = Rng::new(1);
    let mut w = DenoiserParams::<f64>::init(&cfg, 1).unwrap();
    let x = Tensor::from_fn(&[5, 16], |_| rng.uniform(-1.0, 1.0));
    let e1 = Tensor::from_fn(&[1, 8], |_| rng.uniform(-1.0, 1.0));
    let e2 = Tensor::from_fn(&[1, 8], |_| rng.uniform(-1.0, 1.0));
    let mut g = Eager::new();

    let a = modulated_resblock(&mut g, &x, &e1, &w.blocks[0]).unwrap();
    let b = modulated_resblock(&mut g, &x, &e2, &w.blocks[0]).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-6);

    // zero emb and zero modulation: plain block
    let bw = &mut w.blocks[0];
    bw.scale_w = Tensor::zeros(&[8, 16]);
    bw.shift_w = Tensor::zeros(&[8, 16]);
    let plain = {
        let h = crate::numkernel::silu(&layer_norm(&x, &bw.norm1_gain, &bw.norm1_bias).unwrap()).unwrap();
        let h = matmul(&h, &bw.mixer_w).unwrap();
        crate::numkernel::add(&x, &h).unwrap()
    };
    let zero = Tensor::zeros(&[1, 8]);
    let got = modulated_resblock(&mut g, &x, &zero, bw).unwrap();
    assert_eq!(got, plain);

    bw.mixer_w = Tensor::zeros(&[16, 16]);
    assert_eq!(modulated_resblock(&mut g, &x, &e1, bw).unwrap(), x);
}

#[test]
fn single_token_attention_passes_its_value_through() {
    let cfg = cfg16();
    let w = DenoiserParams::<f64>::init(&cfg, 2).unwrap();
    let mut rng = Rng::new(2);
    let tok = Tensor::from_fn(&[1, 16], |_| rng.uniform(-1.0, 1.0));
    let mask = SemiAttentionMask::new(&[1]).unwrap();
    let mut g = Eager::new();
    let out = semi_attention_joint(&mut g, &tok, &mask, &w.blocks[0], 2).unwrap();
    let bw = &w.blocks[0];
    let v = matmul(&layer_norm(&tok, &bw.norm2_gain, &bw.norm2_bias).unwrap(), &bw.wv).unwrap();
    let want = crate::numkernel::add(&tok, &matmul(&v, &bw.wo).unwrap()).unwrap();
    assert!(out.max_abs_diff(&want).unwrap() < 1e-14);

    let wrong = SemiAttentionMask::new(&[2]).unwrap();
    assert!(semi_attention_joint(&mut g, &tok, &wrong, bw, 2).is_err());
}

#[test]
fn reference_branch_matches_joint_segments_at_every_t() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 3).unwrap();
    let mut rng = Rng::new(3);
    let refs = items(&mut rng);
    let ordered = canonical_order(&cfg, &refs).unwrap();
    let mut g = Eager::new();
    let branches: Vec<_> = ordered
        .iter()
        .map(|i| forward_reference_branch(&mut g, &cfg, &model.params, i).unwrap())
        .collect();
    let again = forward_reference_branch(&mut g, &cfg, &model.params, ordered[0]).unwrap();
    assert_eq!(again.kv[1].k.to_le_bytes(), branches[0].kv[1].k.to_le_bytes());

    for t in [0, 1, 37, 99] {
        let x = x_tokens(&cfg, &mut rng);
        let joint = forward_joint(&mut g, &cfg, &model.params, &x, t, &refs, MaskKind::Semi).unwrap();
        let mut start = cfg.n_x();
        for (b, item) in branches.iter().zip(&ordered) {
            let n = item.tokens();
            for l in 0..cfg.blocks {
                let k = joint.kv[l].k.slice_rows(start, n).unwrap();
                let v = joint.kv[l].v.slice_rows(start, n).unwrap();
                let f = joint.features[l].slice_rows(start, n).unwrap();
                assert!(k.max_abs_diff(&b.kv[l].k).unwrap() <= 1e-10);
                assert!(v.max_abs_diff(&b.kv[l].v).unwrap() <= 1e-10);
                assert!(f.max_abs_diff(&b.features[l]).unwrap() <= 1e-10);
            }
            start += n;
        }

        // and the denoising output agrees with the cached formulation
        let kv: Vec<Vec<LayerKv<Tensor<f64>>>> = (0..cfg.blocks)
            .map(|l| branches.iter().map(|b| b.kv[l].clone()).collect())
            .collect();
        let cached = forward_denoise(&mut g, &cfg, &model.params, &x, t, &kv).unwrap();
        assert!(cached.max_abs_diff(&joint.eps).unwrap() <= 1e-10);
        assert_eq!(cached.shape(), &[cfg.n_x(), 4]);
    }
}

#[test]
fn denoise_without_references_is_plain_self_attention() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 5).unwrap();
    let mut rng = Rng::new(5);
    let x = x_tokens(&cfg, &mut rng);
    let mut g = Eager::new();
    let a = forward_denoise(&mut g, &cfg, &model.params, &x, 10, &[]).unwrap();
    let b = forward_joint(&mut g, &cfg, &model.params, &x, 10, &[], MaskKind::Semi).unwrap();
    assert_eq!(a, b.eps);
    let one_layer = vec![Vec::new()];
    assert!(matches!(
        forward_denoise(&mut g, &cfg, &model.params, &x, 10, &one_layer),
        Err(Error::LayerMismatch { expected: 2, got: 1 })
    ));
}

#[test]
fn reference_isolation_and_information_flow() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 6).unwrap();
    let mut rng = Rng::new(6);
    let refs = items(&mut rng);
    let x = x_tokens(&cfg, &mut rng);
    let mut g = Eager::new();
    let run = |g: &mut Eager, x: &Tensor<f64>, refs: &[ReferenceItem<f64>], kind| {
        forward_joint(g, &cfg, &model.params, x, 20, refs, kind).unwrap()
    };
    let base = run(&mut g, &x, &refs, MaskKind::Semi);
    let n_x = cfg.n_x();
    let l = base.mask.len();

    // perturbing X leaves every reference row bit-identical
    let x2 = x.map(|v| v + 0.25);
    let px = run(&mut g, &x2, &refs, MaskKind::Semi);
    for layer in 0..cfg.blocks {
        let a = base.features[layer].slice_rows(n_x, l - n_x).unwrap();
        let b = px.features[layer].slice_rows(n_x, l - n_x).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    // perturbing the category-4 reference (last segment) leaves the others alone
    let mut refs2 = refs.clone();
    refs2[0].latent = refs2[0].latent.map(|v| -v);
    let pr = run(&mut g, &x, &refs2, MaskKind::Semi);
    let untouched = n_x + 6 + 3;
    for layer in 0..cfg.blocks {
        let a = base.features[layer].slice_rows(n_x, untouched - n_x).unwrap();
        let b = pr.features[layer].slice_rows(n_x, untouched - n_x).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }
    // ...while X reads it
    assert!(base.eps.max_abs_diff(&pr.eps).unwrap() > 1e-8);

    // full attention lets X leak into the references
    let fa = run(&mut g, &x, &refs, MaskKind::Full);
    let fb = run(&mut g, &x2, &refs, MaskKind::Full);
    let a = fa.features[0].slice_rows(n_x, l - n_x).unwrap();
    let b = fb.features[0].slice_rows(n_x, l - n_x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-8);
}

#[test]
fn category_changes_reach_the_output() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 7).unwrap();
    let mut rng = Rng::new(7);
    let x = x_tokens(&cfg, &mut rng);
    let r = item(1, [2, 3], &mut rng);
    let mut r2 = r.clone();
    r2.category = 3;
    let mut g = Eager::new();
    let a = forward_joint(&mut g, &cfg, &model.params, &x, 5, &[r], MaskKind::Semi).unwrap();
    let b = forward_joint(&mut g, &cfg, &model.params, &x, 5, &[r2], MaskKind::Semi).unwrap();
    assert!(a.eps.max_abs_diff(&b.eps).unwrap() > 1e-8);
}

#[test]
fn class_gradients_touch_only_present_categories() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 8).unwrap();
    let mut rng = Rng::new(8);
    let refs = vec![item(1, [2, 2], &mut rng), item(3, [1, 2], &mut rng)];
    let x = x_tokens(&cfg, &mut rng);
    let mut tape = Tape::new();
    let w = model.params.map(|_, t| tape.leaf(t.clone()));
    let pass = forward_joint(&mut tape, &cfg, &w, &x, 30, &refs, MaskKind::Semi).unwrap();
    let target = tape.constant(Tensor::from_fn(&[cfg.n_x(), 4], |_| rng.normal()));
    let loss = tape.mse(&pass.eps, &target).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(w.class_table.unwrap()).unwrap();
    for c in 0..5 {
        let nz = g.row(c).iter().any(|&v| v != 0.0);
        assert_eq!(nz, c == 1 || c == 3, "category {c}");
    }
}

#[test]
fn shared_zero_embedding_mode() {
    let cfg = ModelConfig {
        class_embedding: false,
        ..cfg16()
    };
    let model = Model::<f64>::init(cfg.clone(), 9).unwrap();
    assert!(model.params.class_table.is_none());
    let mut rng = Rng::new(9);
    let r = item(0, [2, 2], &mut rng);
    let mut r2 = r.clone();
    r2.category = 2;
    let mut g = Eager::new();
    let a = forward_reference_branch(&mut g, &cfg, &model.params, &r).unwrap();
    let b = forward_reference_branch(&mut g, &cfg, &model.params, &r2).unwrap();
    assert_eq!(a.kv[1].k, b.kv[1].k);
}

#[test]
fn invalid_references_are_rejected() {
    let cfg = cfg16();
    let model = Model::<f64>::init(cfg.clone(), 10).unwrap();
    let mut rng = Rng::new(10);
    let mut g = Eager::new();
    let bad = item(5, [1, 1], &mut rng);
    assert!(matches!(
        forward_reference_branch(&mut g, &cfg, &model.params, &bad),
        Err(Error::UnknownCategory(_))
    ));
    let x = x_tokens(&cfg, &mut rng);
    let dup = vec![item(2, [1, 1], &mut rng), item(2, [1, 2], &mut rng)];
    assert!(matches!(
        forward_joint(&mut g, &cfg, &model.params, &x, 1, &dup, MaskKind::Semi),
        Err(Error::DuplicateCategory(2))
    ));
}

#[test]
fn weights_file_round_trip() {
    let cfg = cfg16();
    let p = DenoiserParams::<f32>::init(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    p.save(&cfg, serde_json::json!({"step": 3}), &path).unwrap();
    let (cfg2, p2, extra) = DenoiserParams::<f32>::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(p2, p);
    assert_eq!(extra["step"], 3);
    assert_eq!(p2.fingerprint(&cfg2), p.fingerprint(&cfg));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(DenoiserParams::<f32>::load(&path), Err(Error::Format(_))));
}
