use super::config::ModelConfig;
use super::embed::{class_embed, positional_encoding, timestep_embed};
use super::mask::{MaskKind, SemiAttentionMask};
use super::params::{BlockWeights, Weights};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numkernel::{AttnSpan, Scalar, Tensor};
use crate::refcache::{cached_attention, concat_kv};

/// One reference: a row-major latent token grid and its category.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceItem<S: Scalar> {
    /// `n_r × d_lat`.
    pub latent: Tensor<S>,
    pub grid: [usize; 2],
    pub category: usize,
}

impl<S: Scalar> ReferenceItem<S> {
    pub fn tokens(&self) -> usize {
        self.latent.rows()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.category >= cfg.categories.len() {
            return Err(Error::UnknownCategory(self.category.to_string()));
        }
        let n = self.grid[0] * self.grid[1];
        if n == 0 || self.latent.numel() == 0 {
            return Err(Error::EmptySegment(format!("reference for category {}", self.category)));
        }
        if self.latent.shape() != [n, cfg.latent_channels()] {
            return Err(Error::shape(
                "reference",
                format!("latent {:?} vs grid {:?}", self.latent.shape(), self.grid),
            ));
        }
        Ok(())
    }

    /// Denoiser input rows: `[latent | 0 | latent]`.
    pub fn input_tokens(&self) -> Tensor<S> {
        let zeros = Tensor::zeros(&[self.latent.rows(), 1]);
        Tensor::concat_cols(&[&self.latent, &zeros, &self.latent]).expect("consistent rows")
    }
}

/// Validates items and returns them in category-table order.
pub fn canonical_order<'a, S: Scalar>(
    cfg: &ModelConfig,
    items: &'a [ReferenceItem<S>],
) -> Result<Vec<&'a ReferenceItem<S>>> {
    let mut seen = vec![false; cfg.categories.len()];
    for item in items {
        item.validate(cfg)?;
        if std::mem::replace(&mut seen[item.category], true) {
            return Err(Error::DuplicateCategory(item.category));
        }
    }
    let mut sorted: Vec<&ReferenceItem<S>> = items.iter().collect();
    sorted.sort_by_key(|i| i.category);
    Ok(sorted)
}

#[derive(Debug, Clone)]
pub struct LayerKv<V> {
    pub k: V,
    pub v: V,
}

/// Per-layer outputs and exported keys/values of one reference branch.
#[derive(Debug, Clone)]
pub struct ReferenceBranch<V> {
    pub features: Vec<V>,
    pub kv: Vec<LayerKv<V>>,
}

/// Per-layer trace of a joint pass over `[X; R_1; …; R_K]`.
#[derive(Debug, Clone)]
pub struct JointPass<V> {
    pub eps: V,
    /// Whole-sequence block outputs, one per layer.
    pub features: Vec<V>,
    /// Whole-sequence keys/values, one per layer.
    pub kv: Vec<LayerKv<V>>,
    pub mask: SemiAttentionMask,
}

fn embed_tokens<S: Scalar, G: Graph<S>>(
    g: &mut G,
    w: &Weights<G::Value>,
    tokens: Tensor<S>,
    grid: [usize; 2],
    width: usize,
) -> Result<G::Value> {
    let x = g.constant(tokens);
    let h = g.matmul(&x, &w.in_w)?;
    let h = g.add_bias(&h, &w.in_b)?;
    let pe = g.constant(positional_encoding(grid, width));
    g.add(&h, &pe)
}

/// `x + mixer(silu(norm(x)) ⊙ (1 + scale(emb)) + shift(emb))`.
pub fn modulated_resblock<S: Scalar, G: Graph<S>>(
    g: &mut G,
    x: &G::Value,
    emb: &G::Value,
    w: &BlockWeights<G::Value>,
) -> Result<G::Value> {
    let h = g.layer_norm(x, &w.norm1_gain, &w.norm1_bias)?;
    let h = g.silu(&h)?;
    let scale = g.matmul(emb, &w.scale_w)?;
    let scale = g.add_bias(&scale, &w.scale_b)?;
    let shift = g.matmul(emb, &w.shift_w)?;
    let shift = g.add_bias(&shift, &w.shift_b)?;
    let h = g.scale_shift(&h, &scale, &shift)?;
    let h = g.matmul(&h, &w.mixer_w)?;
    let h = g.add_bias(&h, &w.mixer_b)?;
    g.add(x, &h)
}

struct Qkv<V> {
    q: V,
    k: V,
    v: V,
}

fn project_qkv<S: Scalar, G: Graph<S>>(g: &mut G, x: &G::Value, w: &BlockWeights<G::Value>) -> Result<Qkv<G::Value>> {
    let h = g.layer_norm(x, &w.norm2_gain, &w.norm2_bias)?;
    Ok(Qkv {
        q: g.matmul(&h, &w.wq)?,
        k: g.matmul(&h, &w.wk)?,
        v: g.matmul(&h, &w.wv)?,
    })
}

fn residual_out<S: Scalar, G: Graph<S>>(
    g: &mut G,
    x: &G::Value,
    attn: &G::Value,
    w: &BlockWeights<G::Value>,
) -> Result<G::Value> {
    let o = g.matmul(attn, &w.wo)?;
    g.add(x, &o)
}

fn semi_attention_traced<S: Scalar, G: Graph<S>>(
    g: &mut G,
    seq: &G::Value,
    mask: &SemiAttentionMask,
    w: &BlockWeights<G::Value>,
    heads: usize,
) -> Result<(G::Value, LayerKv<G::Value>)> {
    let n = g.value(seq).rows();
    if n != mask.len() {
        return Err(Error::shape("semi_attention", format!("sequence of {n} rows, mask covers {}", mask.len())));
    }
    let qkv = project_qkv(g, seq, w)?;
    let a = g.attention(&qkv.q, &qkv.k, &qkv.v, heads, &mask.spans())?;
    let out = residual_out(g, seq, &a, w)?;
    Ok((out, LayerKv { k: qkv.k, v: qkv.v }))
}

/// Pre-norm multi-head attention over the joint sequence under `mask`,
/// with output projection and residual.
pub fn semi_attention_joint<S: Scalar, G: Graph<S>>(
    g: &mut G,
    seq: &G::Value,
    mask: &SemiAttentionMask,
    w: &BlockWeights<G::Value>,
    heads: usize,
) -> Result<G::Value> {
    Ok(semi_attention_traced(g, seq, mask, w, heads)?.0)
}

fn output_head<S: Scalar, G: Graph<S>>(g: &mut G, w: &Weights<G::Value>, x: &G::Value) -> Result<G::Value> {
    let h = g.layer_norm(x, &w.out_norm_gain, &w.out_norm_bias)?;
    let h = g.matmul(&h, &w.out_w)?;
    g.add_bias(&h, &w.out_b)
}

fn check_x_tokens<S: Scalar>(cfg: &ModelConfig, x: &Tensor<S>) -> Result<()> {
    if x.shape() != [cfg.n_x(), cfg.input_channels()] {
        return Err(Error::shape(
            "denoise input",
            format!("{:?}, expected [{}, {}]", x.shape(), cfg.n_x(), cfg.input_channels()),
        ));
    }
    Ok(())
}

/// Runs one reference through the block stack on its class embedding. There
/// is no timestep input.
pub fn forward_reference_branch<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cfg: &ModelConfig,
    w: &Weights<G::Value>,
    item: &ReferenceItem<S>,
) -> Result<ReferenceBranch<G::Value>> {
    item.validate(cfg)?;
    let emb = class_embed(g, cfg, w, item.category)?;
    let mut r = embed_tokens(g, w, item.input_tokens(), item.grid, cfg.width)?;
    let spans = AttnSpan::full(item.tokens(), item.tokens());
    let mut out = ReferenceBranch {
        features: Vec::with_capacity(cfg.blocks),
        kv: Vec::with_capacity(cfg.blocks),
    };
    for bw in &w.blocks {
        r = modulated_resblock(g, &r, &emb, bw)?;
        let qkv = project_qkv(g, &r, bw)?;
        let a = g.attention(&qkv.q, &qkv.k, &qkv.v, cfg.heads, &spans)?;
        r = residual_out(g, &r, &a, bw)?;
        out.features.push(r.clone());
        out.kv.push(LayerKv { k: qkv.k, v: qkv.v });
    }
    Ok(out)
}

/// Noise prediction for X at step `t` against reference keys/values
/// indexed `[layer][reference]`. An empty slice means no references.
pub fn forward_denoise<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cfg: &ModelConfig,
    w: &Weights<G::Value>,
    x_tokens: &Tensor<S>,
    t: usize,
    ref_kv: &[Vec<LayerKv<G::Value>>],
) -> Result<G::Value> {
    check_x_tokens(cfg, x_tokens)?;
    if !ref_kv.is_empty() && ref_kv.len() != cfg.blocks {
        return Err(Error::LayerMismatch {
            expected: cfg.blocks,
            got: ref_kv.len(),
        });
    }
    let emb = timestep_embed(g, cfg, w, t)?;
    let mut x = embed_tokens(g, w, x_tokens.clone(), cfg.latent_grid, cfg.width)?;
    for (l, bw) in w.blocks.iter().enumerate() {
        x = modulated_resblock(g, &x, &emb, bw)?;
        let qkv = project_qkv(g, &x, bw)?;
        let layer: &[LayerKv<G::Value>] = ref_kv.get(l).map_or(&[], |v| v.as_slice());
        let (k_full, v_full) = concat_kv(g, &qkv.k, &qkv.v, layer)?;
        let a = cached_attention(g, &qkv.q, &k_full, &v_full, cfg.heads)?;
        x = residual_out(g, &x, &a, bw)?;
    }
    output_head(g, w, &x)
}

/// Uncached pass over the joint sequence `[X; R_1; …; R_K]`, references in
/// category order. X rows run on `γ(t)`, each reference on its class
/// embedding.
pub fn forward_joint<S: Scalar, G: Graph<S>>(
    g: &mut G,
    cfg: &ModelConfig,
    w: &Weights<G::Value>,
    x_tokens: &Tensor<S>,
    t: usize,
    items: &[ReferenceItem<S>],
    kind: MaskKind,
) -> Result<JointPass<G::Value>> {
    check_x_tokens(cfg, x_tokens)?;
    let items = canonical_order(cfg, items)?;
    let mut lengths = vec![cfg.n_x()];
    lengths.extend(items.iter().map(|i| i.tokens()));
    let mask = SemiAttentionMask::with_kind(&lengths, kind)?;

    let mut embs = vec![timestep_embed(g, cfg, w, t)?];
    let mut segs = vec![embed_tokens(g, w, x_tokens.clone(), cfg.latent_grid, cfg.width)?];
    for item in &items {
        embs.push(class_embed(g, cfg, w, item.category)?);
        segs.push(embed_tokens(g, w, item.input_tokens(), item.grid, cfg.width)?);
    }

    let mut features = Vec::with_capacity(cfg.blocks);
    let mut kv = Vec::with_capacity(cfg.blocks);
    for bw in &w.blocks {
        for (s, e) in segs.iter_mut().zip(&embs) {
            *s = modulated_resblock(g, s, e, bw)?;
        }
        let seq = g.concat_rows(&segs)?;
        let (seq, layer_kv) = semi_attention_traced(g, &seq, &mask, bw, cfg.heads)?;
        let mut start = 0;
        for (s, &n) in segs.iter_mut().zip(&lengths) {
            *s = g.slice_rows(&seq, start, n)?;
            start += n;
        }
        features.push(seq);
        kv.push(layer_kv);
    }
    let eps = output_head(g, w, &segs[0])?;
    Ok(JointPass {
        eps,
        features,
        kv,
        mask,
    })
}
