//! Desk-scale denoiser: token embeddings, modulated residual blocks and
//! semi-attention layers, written once against [`crate::graph::Graph`].

mod config;
mod embed;
mod forward;
mod mask;
mod params;
mod vae;

pub use config::{ModelConfig, DEFAULT_CATEGORIES};
pub use embed::{class_embed, positional_encoding, timestep_embed, timestep_sinusoid};
pub use forward::{
    canonical_order, forward_denoise, forward_joint, forward_reference_branch, modulated_resblock,
    semi_attention_joint, JointPass, LayerKv, ReferenceBranch, ReferenceItem,
};
pub use mask::{MaskKind, SemiAttentionMask};
pub use params::{BlockWeights, DenoiserParams, Model, Weights};
pub use vae::PseudoVae;

pub(crate) use params::hex;

#[cfg(test)]
mod tests;
