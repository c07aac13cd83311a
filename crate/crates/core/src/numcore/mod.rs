//! Minimal dense tensor core: forward kernels, hand-written backward passes
//! and a finite-difference checker.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use attention::{multi_head_attention, AttentionCache, MultiHeadAttention};
pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport, GradCheckable, Sampling};
pub use layers::{batchnorm1d, layer_norm, BatchNorm, Dense, Embedding, LayerNorm, Mode};
pub use ops::{conv1d, global_max_pool, softmax_cross_entropy, Padding};
pub use tensor::{DType, Param, Scalar, Tensor};
