//! Four-stage hierarchical RSIR transformer.
//!
//! Patch embedding (stride 4) feeds stage 1; each later stage starts with a
//! 2×2 patch merge that halves the grid side and doubles the width. A final
//! layer norm, token mean and linear head produce class logits.

pub mod accounting;
mod config;
mod model;

pub use accounting::{attention_flops, flops_count, param_count, AttentionFlops, FlopBreakdown};
pub use config::{ModelConfig, StageConfig, NUM_MERGES};
pub use model::{
    extract_patches, merge_neighbors, AttentionParams, LinearParams, Model, NormParams, PatchMerge, RsirBlock,
    Stage, LN_EPS,
};
