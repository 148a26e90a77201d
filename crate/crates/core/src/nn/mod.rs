//! Transformer backbone and the baseline read-out heads.

pub mod attention;
pub mod attpool;
pub mod backbone;
pub mod layers;
pub mod params;

pub use attention::MultiHeadAttention;
pub use attpool::{AttPool, AttPoolConfig, CrossKind, LinearBottleneck};
pub use backbone::{pool_gap, pool_token, Backbone, BackboneConfig, BackboneOutput, Block, InputBatch, InputKind, TokenPool};
pub use layers::{LayerNorm, Linear, Mlp, L2_EPS, LAYER_NORM_EPS};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
