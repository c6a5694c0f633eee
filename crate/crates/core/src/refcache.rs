//! Reference key/value cache: computed once per request, concatenated
//! behind the denoising keys/values in every step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::denoiser::{canonical_order, forward_reference_branch, hex, LayerKv, Model, ReferenceItem};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, KernelStats};
use crate::numkernel::{AttnSpan, Scalar, Tensor};

/// Immutable per-layer, per-reference keys and values.
#[derive(Debug, Clone)]
pub struct ReferenceKVCache<S: Scalar> {
    /// Indexed `[layer][reference]`, references in category order.
    layers: Vec<Vec<LayerKv<Tensor<S>>>>,
    categories: Vec<usize>,
    segment_lengths: Vec<usize>,
    fingerprint: String,
    stats: KernelStats,
}

impl<S: Scalar> ReferenceKVCache<S> {
    pub fn layers(&self) -> &[Vec<LayerKv<Tensor<S>>>] {
        &self.layers
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    /// Token counts of the cached references.
    pub fn segment_lengths(&self) -> &[usize] {
        &self.segment_lengths
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Identity of the inputs: model id, categories and reference latents.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Kernel work spent building the cache.
    pub fn build_stats(&self) -> KernelStats {
        self.stats
    }

    /// Hash of the cached tensors themselves.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for kv in layer {
                h.update(kv.k.to_le_bytes());
                h.update(kv.v.to_le_bytes());
            }
        }
        hex(&h.finalize()[..16])
    }

    /// Writes the cache in the tensor container format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(CacheMeta {
            fingerprint: self.fingerprint.clone(),
            categories: self.categories.clone(),
            segment_lengths: self.segment_lengths.clone(),
            layers: self.layers.len(),
        })?;
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (r, kv) in layer.iter().enumerate() {
                names.push((format!("layer{l}.ref{r}.k"), &kv.k));
                names.push((format!("layer{l}.ref{r}.v"), &kv.v));
            }
        }
        let tensors: Vec<(&str, &Tensor<S>)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        container::write_file(path, &meta, &tensors)
    }

    /// Reads a cache written by [`Self::save`]. Values round through 32-bit.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = container::read_file(path)?;
        let meta: CacheMeta = serde_json::from_value(c.meta)?;
        let refs = meta.categories.len();
        if c.tensors.len() != 2 * refs * meta.layers {
            return Err(Error::Format("cache tensor count does not match its header".into()));
        }
        let mut it = c.tensors.into_iter().map(|(_, t)| t.cast::<S>());
        let mut layers = Vec::with_capacity(meta.layers);
        for _ in 0..meta.layers {
            let mut layer = Vec::with_capacity(refs);
            for &n in &meta.segment_lengths {
                let k = it.next().expect("counted");
                let v = it.next().expect("counted");
                if k.rows() != n || v.shape() != k.shape() {
                    return Err(Error::Format("cache tensor shapes do not match segment lengths".into()));
                }
                layer.push(LayerKv { k, v });
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            categories: meta.categories,
            segment_lengths: meta.segment_lengths,
            fingerprint: meta.fingerprint,
            stats: KernelStats::default(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheMeta {
    fingerprint: String,
    categories: Vec<usize>,
    segment_lengths: Vec<usize>,
    layers: usize,
}

/// Fingerprint of a request's references under a given model.
pub fn reference_fingerprint<S: Scalar>(model: &Model<S>, items: &[ReferenceItem<S>]) -> Result<String> {
    let items = canonical_order(&model.cfg, items)?;
    let mut h = Sha256::new();
    h.update(model.id().as_bytes());
    for item in items {
        h.update((item.category as u64).to_le_bytes());
        h.update((item.grid[0] as u64).to_le_bytes());
        h.update((item.grid[1] as u64).to_le_bytes());
        h.update(item.latent.to_le_bytes());
    }
    Ok(hex(&h.finalize()[..16]))
}

/// Runs each reference branch once and keeps its per-layer keys/values.
pub fn precompute_cache<S: Scalar>(model: &Model<S>, items: &[ReferenceItem<S>]) -> Result<ReferenceKVCache<S>> {
    let fingerprint = reference_fingerprint(model, items)?;
    let ordered = canonical_order(&model.cfg, items)?;
    let mut g = Eager::new();
    let mut layers: Vec<Vec<LayerKv<Tensor<S>>>> = vec![Vec::with_capacity(ordered.len()); model.cfg.blocks];
    for item in &ordered {
        let branch = forward_reference_branch(&mut g, &model.cfg, &model.params, item)?;
        for (layer, kv) in layers.iter_mut().zip(branch.kv) {
            layer.push(kv);
        }
    }
    Ok(ReferenceKVCache {
        layers,
        categories: ordered.iter().map(|i| i.category).collect(),
        segment_lengths: ordered.iter().map(|i| i.tokens()).collect(),
        fingerprint,
        stats: g.stats,
    })
}

/// `[K_X; K_1; …; K_K]` and the same for values.
pub fn concat_kv<S: Scalar, G: Graph<S>>(
    g: &mut G,
    k_x: &G::Value,
    v_x: &G::Value,
    layer: &[LayerKv<G::Value>],
) -> Result<(G::Value, G::Value)> {
    let width = g.value(k_x).cols();
    for kv in layer {
        if g.value(&kv.k).cols() != width || g.value(&kv.v).cols() != g.value(v_x).cols() {
            return Err(Error::shape(
                "concat_kv",
                format!("cached width {} vs {width}", g.value(&kv.k).cols()),
            ));
        }
    }
    if layer.is_empty() {
        return Ok((k_x.clone(), v_x.clone()));
    }
    let mut ks = vec![k_x.clone()];
    let mut vs = vec![v_x.clone()];
    for kv in layer {
        ks.push(kv.k.clone());
        vs.push(kv.v.clone());
    }
    Ok((g.concat_rows(&ks)?, g.concat_rows(&vs)?))
}

/// Attention for the denoising queries only, over every key.
pub fn cached_attention<S: Scalar, G: Graph<S>>(
    g: &mut G,
    q_x: &G::Value,
    k_full: &G::Value,
    v_full: &G::Value,
    heads: usize,
) -> Result<G::Value> {
    let spans = AttnSpan::full(g.value(q_x).rows(), g.value(k_full).rows());
    g.attention(q_x, k_full, v_full, heads, &spans)
}
