//! Reverse-mode differentiation over matrices and the layers built on it.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::grad_check;
pub use layers::{
    depthwise_dilated_conv1d, dropout, film, glu, group_norm, linear, multi_head_cross_attention,
    pool_matrix, positional_encoding, sinusoidal, softmax_rows, windowed_mean_pool, Attention,
    Embedding, FeedForward, LayerNorm, Linear, Masking,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Checkpoint, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
