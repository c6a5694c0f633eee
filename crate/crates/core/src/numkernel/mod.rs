//! Dense numeric kernels and seeded initialization.

mod attention;
mod ops;
mod rng;
mod tensor;

pub use attention::{
    attention, attention_backward, attention_forward, attention_probs_dense, masked_attention_dense,
    AttnProbs, AttnSpan,
};
pub use ops::{
    add, add_bias, col_sums, init_weights, layer_norm, layer_norm_with_stats, matmul, matmul_nt,
    matmul_tn, scale_shift, silu, softmax_rows, InitScheme, LayerNormStats, LAYER_NORM_EPS,
};
pub(crate) use ops::sigmoid;
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
