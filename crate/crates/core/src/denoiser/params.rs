use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::numkernel::{init_weights, InitScheme, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<V> {
    pub norm1_gain: V,
    pub norm1_bias: V,
    pub scale_w: V,
    pub scale_b: V,
    pub shift_w: V,
    pub shift_b: V,
    pub mixer_w: V,
    pub mixer_b: V,
    pub norm2_gain: V,
    pub norm2_bias: V,
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub wo: V,
}

/// Every learnable tensor of the denoiser, generic over the value carrier
/// so the same layout holds tensors, tape handles, gradients or optimizer
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<V> {
    pub in_w: V,
    pub in_b: V,
    pub time_w1: V,
    pub time_b1: V,
    pub time_w2: V,
    pub time_b2: V,
    /// `categories × emb_dim`; absent in the shared-zero ablation.
    pub class_table: Option<V>,
    pub blocks: Vec<BlockWeights<V>>,
    pub out_norm_gain: V,
    pub out_norm_bias: V,
    pub out_w: V,
    pub out_b: V,
}

pub type DenoiserParams<S> = Weights<Tensor<S>>;

impl<V> BlockWeights<V> {
    fn try_map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a V) -> Result<U>,
    ) -> Result<BlockWeights<U>> {
        let mut g = |name: &str, v: &'a V| f(&format!("{prefix}.{name}"), v);
        Ok(BlockWeights {
            norm1_gain: g("norm1_gain", &self.norm1_gain)?,
            norm1_bias: g("norm1_bias", &self.norm1_bias)?,
            scale_w: g("scale_w", &self.scale_w)?,
            scale_b: g("scale_b", &self.scale_b)?,
            shift_w: g("shift_w", &self.shift_w)?,
            shift_b: g("shift_b", &self.shift_b)?,
            mixer_w: g("mixer_w", &self.mixer_w)?,
            mixer_b: g("mixer_b", &self.mixer_b)?,
            norm2_gain: g("norm2_gain", &self.norm2_gain)?,
            norm2_bias: g("norm2_bias", &self.norm2_bias)?,
            wq: g("wq", &self.wq)?,
            wk: g("wk", &self.wk)?,
            wv: g("wv", &self.wv)?,
            wo: g("wo", &self.wo)?,
        })
    }
}

impl<V> BlockWeights<V> {
    fn values_mut(&mut self) -> [&mut V; 14] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.scale_w,
            &mut self.scale_b,
            &mut self.shift_w,
            &mut self.shift_b,
            &mut self.mixer_w,
            &mut self.mixer_b,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
        ]
    }
}

impl<V> Weights<V> {
    /// Mutable references in the same order as [`Self::named`].
    pub fn values_mut(&mut self) -> Vec<&mut V> {
        let mut out: Vec<&mut V> = vec![
            &mut self.in_w,
            &mut self.in_b,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        if let Some(t) = self.class_table.as_mut() {
            out.push(t);
        }
        for b in &mut self.blocks {
            out.extend(b.values_mut());
        }
        out.extend([
            &mut self.out_norm_gain,
            &mut self.out_norm_bias,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    /// Maps every tensor in a fixed order, passing its dotted name.
    pub fn try_map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a V) -> Result<U>) -> Result<Weights<U>> {
        let in_w = f("in_w", &self.in_w)?;
        let in_b = f("in_b", &self.in_b)?;
        let time_w1 = f("time_w1", &self.time_w1)?;
        let time_b1 = f("time_b1", &self.time_b1)?;
        let time_w2 = f("time_w2", &self.time_w2)?;
        let time_b2 = f("time_b2", &self.time_b2)?;
        let class_table = match &self.class_table {
            Some(t) => Some(f("class_table", t)?),
            None => None,
        };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights {
            in_w,
            in_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            class_table,
            blocks,
            out_norm_gain: f("out_norm_gain", &self.out_norm_gain)?,
            out_norm_bias: f("out_norm_bias", &self.out_norm_bias)?,
            out_w: f("out_w", &self.out_w)?,
            out_b: f("out_b", &self.out_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &V) -> U) -> Weights<U> {
        self.try_map(|n, v| Ok(f(n, v))).expect("infallible map")
    }

    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out = Vec::new();
        self.try_map(|n, v| {
            out.push((n.to_string(), v));
            Ok(())
        })
        .expect("infallible visit");
        out
    }

    /// Combines two layouts tensor by tensor.
    pub fn zip_with<U, W>(&self, other: &Weights<U>, mut f: impl FnMut(&str, &V, &U) -> Result<W>) -> Result<Weights<W>> {
        let others = other.named();
        let mut it = others.into_iter();
        self.try_map(|n, v| {
            let (on, u) = it.next().ok_or_else(|| Error::Format(format!("layout mismatch at {n}")))?;
            if on != n {
                return Err(Error::Format(format!("layout mismatch: {n} vs {on}")));
            }
            f(n, v, u)
        })
    }
}

impl<S: Scalar> Weights<Tensor<S>> {
    /// Seeded initialization: fan-in uniform matrices, unit gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let (d, e, l) = (cfg.width, cfg.emb_dim, cfg.latent_channels());
        let mut mat = |r: usize, c: usize| init_weights::<S>(&[r, c], &mut rng, InitScheme::UniformFanIn);
        let zeros = |n: usize| Tensor::<S>::zeros(&[n]);
        let ones = |n: usize| Tensor::<S>::full(&[n], S::one());

        let in_w = mat(cfg.input_channels(), d);
        let time_w1 = mat(e, e);
        let time_w2 = mat(e, e);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockWeights {
                norm1_gain: ones(d),
                norm1_bias: zeros(d),
                scale_w: mat(e, d),
                scale_b: zeros(d),
                shift_w: mat(e, d),
                shift_b: zeros(d),
                mixer_w: mat(d, d),
                mixer_b: zeros(d),
                norm2_gain: ones(d),
                norm2_bias: zeros(d),
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
            });
        }
        let out_w = mat(d, l);
        let class_table = cfg.class_embedding.then(|| {
            Tensor::from_fn(&[cfg.categories.len(), e], |_| S::of(rng.uniform(-1.0, 1.0)))
        });
        Ok(Self {
            in_w,
            in_b: zeros(d),
            time_w1,
            time_b1: zeros(e),
            time_w2,
            time_b2: zeros(e),
            class_table,
            blocks,
            out_norm_gain: ones(d),
            out_norm_bias: zeros(d),
            out_w,
            out_b: zeros(l),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Expected shapes for `cfg`, used to validate loaded weights.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Weights::<Tensor<f32>>::shapes(cfg);
        let got: Vec<(String, Vec<usize>)> = self.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if got != expected {
            return Err(Error::Format("weights do not match the model config".into()));
        }
        Ok(())
    }

    fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let zero = Weights::<Tensor<f32>>::init(cfg, 0).expect("validated config");
        zero.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }

    /// Content hash over config and every tensor at its own precision.
    pub fn fingerprint(&self, cfg: &ModelConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(cfg).expect("config serializes"));
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize()[..16])
    }

    pub fn cast<T: Scalar>(&self) -> Weights<Tensor<T>> {
        self.map(|_, t| t.cast())
    }

    pub fn save(&self, cfg: &ModelConfig, extra: serde_json::Value, path: &std::path::Path) -> Result<()> {
        let header = WeightsHeader {
            config: cfg.clone(),
            extra,
        };
        let named = self.named();
        let tensors: Vec<(&str, &Tensor<S>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        container::write_file(path, &serde_json::to_value(header)?, &tensors)
    }

    /// Loads weights and the config stored alongside them.
    pub fn load(path: &std::path::Path) -> Result<(ModelConfig, Self, serde_json::Value)> {
        let Container { meta, tensors } = container::read_file(path)?;
        let header: WeightsHeader = serde_json::from_value(meta)?;
        header.config.validate()?;
        let template = Weights::<Tensor<f32>>::init(&header.config, 0)?;
        let mut it = tensors.into_iter();
        let w = template.try_map(|name, t| {
            let (n, v) = it.next().ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if n != name || v.shape() != t.shape() {
                return Err(Error::Format(format!("expected {name} {:?}, found {n} {:?}", t.shape(), v.shape())));
            }
            Ok(v.cast::<S>())
        })?;
        if it.next().is_some() {
            return Err(Error::Format("trailing tensors in weights file".into()));
        }
        Ok((header.config, w, header.extra))
    }
}

/// Config and weights validated against each other, with a content id.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: DenoiserParams<S>,
    id: String,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, params: DenoiserParams<S>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&cfg)?;
        let id = params.fingerprint(&cfg);
        Ok(Self { cfg, params, id })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&cfg, seed)?;
        Self::new(cfg, params)
    }

    /// Fingerprint of config and weights at construction time.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model::new(self.cfg.clone(), self.params.cast()).expect("layout preserved by cast")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
