//! Stem, patch embeddings, local and TinyViM blocks, the S/B/L variants, accounting, fusion
//! and weight persistence.

pub mod blocks;
pub mod config;
pub mod model;
pub mod weights;

pub use blocks::{Block, Ffn, LocalBlock, PatchEmbed, Stem, TinyVimBlock};
pub use config::{ModelConfig, StageConfig, Variant, ALPHAS, POOL_RATIOS};
pub use model::{
    build_model, count_macs, count_params, effective_ratios, fuse_reparam, Model, ModelOutput,
    Stage,
};
pub use weights::{apply_weights, decode_weights, encode_weights, load_weights, save_weights};
