//! Cacheable reference conditioning for diffusion denoisers.
//!
//! Reference items (garments, accessories) are encoded by a branch that is
//! conditioned on a static per-category embedding instead of the timestep,
//! and interact with the denoising tokens through a semi-attention mask in
//! which references only attend to themselves. Their keys and values are
//! therefore constant over the whole sampling run and are computed once
//! into a [`refcache::ReferenceKVCache`].

pub mod error;
pub mod numkernel;

pub use error::{Error, Result};
pub mod autodiff;
pub mod graph;
pub mod container;
pub mod denoiser;
pub mod refcache;
pub mod sampler;
pub mod traindemo;
pub mod benchkit;
