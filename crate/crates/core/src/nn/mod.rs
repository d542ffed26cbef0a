//! Layers with explicit forward caches and backward passes.
//!
//! Every `backward` accumulates parameter gradients into a structurally
//! identical value (`grad`) and returns the gradient w.r.t. its input.

mod activation;
mod attention;
mod linear;
mod norm;
mod transformer;

pub use activation::{gelu, gelu_backward};
pub use attention::{Attention, AttentionCache};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use transformer::{
    Block, BlockCache, Mlp, MlpCache, Transformer, TransformerCache, TransformerOutput,
};
