//! Conformer-based mask estimator.
//!
//! The primary encoder runs modulated conformer blocks over the stacked
//! noisy and reference features. A second conformer stack encodes the noise
//! context, which cross-attention blocks then summarise using the primary
//! encoding as queries. A frame-wise dense layer with a sigmoid produces the
//! mask. Self-attention is causal with a finite look-back window and the
//! convolutions are left-padded, so mask frame `t` never depends on input
//! frames after `t`.

mod blocks;
mod checkpoint;
mod config;
mod frontend;
mod layers;
mod params;

#[cfg(test)]
mod tests;

pub use blocks::{ConformerBlock, ConformerTrace, CrossAttentionBlock, CrossTrace, ModulatedConformerBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST};
pub use config::ArchConfig;
pub use frontend::{FrontendInput, FrontendModel, InputVars};
pub use layers::{local_causal_mask, multi_head_attention, Attention, ConvModule, Dense, FeedForward, Film, LayerNorm, Visibility, LN_EPS};
pub use params::{ParamId, ParamStore, Params};
pub(crate) use params::standalone;
