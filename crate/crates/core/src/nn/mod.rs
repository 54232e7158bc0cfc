//! Network building blocks: patching, masks, attention, layers, encodings.

pub mod attention;
pub mod layers;
pub mod mask;
pub mod patch;
pub mod pe;

pub use attention::{attend_with_cache, attention, attention_var, AttnSpec, KvCache, LayerKv, Segment};
pub use layers::{layer_norm, Block, LayerNorm, Linear, Mlp, SelfAttention};
pub use mask::{build_hybrid_mask, AttentionMask, MaskRule};
pub use patch::{patchify, unpatchify, PatchLayout, TokenGrid};
pub use pe::{sinusoidal_pe, time_features};
