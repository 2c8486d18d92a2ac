use serde::{Deserialize, Serialize};

use crate::datagen::DVECTOR_DIM;
use crate::error::{Error, Result};
use crate::features::N_MELS;

/// Architecture hyperparameters of [`FrontendModel`](super::FrontendModel).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_primary_blocks: usize,
    pub n_context_blocks: usize,
    pub n_cross_blocks: usize,
    pub ffn_multiplier: usize,
    pub n_heads: usize,
    /// Frames visible to self-attention, counting the current frame.
    pub attn_window_past: usize,
    pub conv_kernel: usize,
    pub dvec_dim: usize,
    pub n_mels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_primary_blocks: 2,
            n_context_blocks: 2,
            n_cross_blocks: 2,
            ffn_multiplier: 6,
            n_heads: 4,
            attn_window_past: 65,
            conv_kernel: 15,
            dvec_dim: DVECTOR_DIM,
            n_mels: N_MELS,
        }
    }
}

impl ArchConfig {
    /// Full-size joint model.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Echo-cancellation-only variant: a deeper primary encoder and no
    /// noise-context or cross-attention encoders.
    pub fn aec_only() -> Self {
        Self {
            n_primary_blocks: 6,
            n_context_blocks: 0,
            n_cross_blocks: 0,
            ffn_multiplier: 8,
            ..Self::default()
        }
    }

    /// Narrow joint model that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 48,
            ffn_multiplier: 4,
            ..Self::default()
        }
    }

    /// Minimal instance for finite-difference checks.
    pub fn tiny(d_model: usize) -> Self {
        Self {
            d_model,
            n_primary_blocks: 1,
            n_context_blocks: 1,
            n_cross_blocks: 1,
            ffn_multiplier: 2,
            n_heads: 2,
            attn_window_past: 3,
            conv_kernel: 3,
            dvec_dim: 6,
            n_mels: 5,
        }
    }

    pub fn has_context(&self) -> bool {
        self.n_cross_blocks > 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("ffn_multiplier", self.ffn_multiplier),
            ("n_heads", self.n_heads),
            ("attn_window_past", self.attn_window_past),
            ("conv_kernel", self.conv_kernel),
            ("dvec_dim", self.dvec_dim),
            ("n_mels", self.n_mels),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }
}
