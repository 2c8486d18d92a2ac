//! Conformer, modulated conformer and modulated cross-attention blocks.

use crate::autodiff::{Real, Var};
use crate::error::Result;

use super::layers::{Attention, ConvModule, Dense, FeedForward, Film, LayerNorm, Visibility};
use super::params::{standalone, Init, ParamStore, Params};
use super::ArchConfig;

/// Intermediate activations of a conformer block.
#[derive(Debug, Clone, Copy)]
pub struct ConformerTrace<'t, F: Real> {
    pub after_ff1: Var<'t, F>,
    pub after_conv: Var<'t, F>,
    pub after_mhsa: Var<'t, F>,
    pub output: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub conv: ConvModule,
    pub mhsa: Attention,
    pub ff2: FeedForward,
    pub norm_out: LayerNorm,
}

impl ConformerBlock {
    /// Freshly initialised block with its own parameters.
    pub fn init<F: Real>(cfg: &ArchConfig, seed: u64) -> (Self, ParamStore<F>) {
        standalone(seed, |init| Self::new(init, cfg))
    }

    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, cfg: &ArchConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ff1: FeedForward::new(&mut init.scope("ff1"), d, cfg.ffn_multiplier),
            conv: ConvModule::new(&mut init.scope("conv"), d, cfg.conv_kernel),
            mhsa: Attention::new(&mut init.scope("mhsa"), d, cfg.n_heads, false),
            ff2: FeedForward::new(&mut init.scope("ff2"), d, cfg.ffn_multiplier),
            norm_out: LayerNorm::new(&mut init.scope("norm_out"), d),
        }
    }

    pub fn trace<'t, F: Real>(
        &self,
        p: &Params<'t, F>,
        x: Var<'t, F>,
        window: usize,
    ) -> Result<ConformerTrace<'t, F>> {
        let after_ff1 = self.ff1.half_residual(p, x)?;
        let after_conv = after_ff1.add(self.conv.forward(p, after_ff1)?)?;
        let after_mhsa = after_conv.add(self.mhsa.forward(p, after_conv, None, Visibility::Causal { window })?)?;
        let output = self.norm_out.forward(p, self.ff2.half_residual(p, after_mhsa)?)?;
        Ok(ConformerTrace {
            after_ff1,
            after_conv,
            after_mhsa,
            output,
        })
    }

    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>, window: usize) -> Result<Var<'t, F>> {
        Ok(self.trace(p, x, window)?.output)
    }
}

/// Speaker-modulated conformer block: FiLM, then a conformer block.
#[derive(Debug, Clone)]
pub struct ModulatedConformerBlock {
    pub film: Film,
    pub block: ConformerBlock,
}

impl ModulatedConformerBlock {
    /// Freshly initialised block with its own parameters.
    pub fn init<F: Real>(cfg: &ArchConfig, seed: u64) -> (Self, ParamStore<F>) {
        standalone(seed, |init| Self::new(init, cfg))
    }

    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, cfg: &ArchConfig) -> Self {
        Self {
            film: Film::new(&mut init.scope("film"), cfg.dvec_dim, cfg.d_model),
            block: ConformerBlock::new(init, cfg),
        }
    }

    pub fn forward<'t, F: Real>(
        &self,
        p: &Params<'t, F>,
        x: Var<'t, F>,
        m: Var<'t, F>,
        window: usize,
    ) -> Result<Var<'t, F>> {
        let modulated = self.film.forward(p, x, m)?;
        self.block.forward(p, modulated, window)
    }
}

/// Intermediate activations of a cross-attention block, in order of
/// computation.
#[derive(Debug, Clone, Copy)]
pub struct CrossTrace<'t, F: Real> {
    pub x_hat: Var<'t, F>,
    pub x_tilde: Var<'t, F>,
    pub n_tilde: Var<'t, F>,
    pub x1: Var<'t, F>,
    pub n1: Var<'t, F>,
    pub x2: Var<'t, F>,
    pub x3: Var<'t, F>,
    pub x4: Var<'t, F>,
    pub output: Var<'t, F>,
}

/// Speaker-modulated block that summarises an auxiliary sequence `n` with
/// the processed input as queries.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub film: Film,
    pub ff1_x: FeedForward,
    pub ff1_n: FeedForward,
    pub conv_x: ConvModule,
    pub conv_n: ConvModule,
    pub mhca_context: Attention,
    /// Frame-wise scale applied to the attended sequence.
    pub frame_scale: Dense,
    pub frame_shift: Dense,
    pub mhca_modulated: Attention,
    pub ff2: FeedForward,
    pub norm_out: LayerNorm,
}

impl CrossAttentionBlock {
    /// Freshly initialised block with its own parameters.
    pub fn init<F: Real>(cfg: &ArchConfig, seed: u64) -> (Self, ParamStore<F>) {
        standalone(seed, |init| Self::new(init, cfg))
    }

    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, cfg: &ArchConfig) -> Self {
        let (d, k, mult, heads) = (cfg.d_model, cfg.conv_kernel, cfg.ffn_multiplier, cfg.n_heads);
        Self {
            film: Film::new(&mut init.scope("film"), cfg.dvec_dim, d),
            ff1_x: FeedForward::new(&mut init.scope("ff1_x"), d, mult),
            ff1_n: FeedForward::new(&mut init.scope("ff1_n"), d, mult),
            conv_x: ConvModule::new(&mut init.scope("conv_x"), d, k),
            conv_n: ConvModule::new(&mut init.scope("conv_n"), d, k),
            mhca_context: Attention::new(&mut init.scope("mhca_ctx"), d, heads, true),
            frame_scale: Dense::new(&mut init.scope("frame_r"), d, d),
            frame_shift: Dense::new(&mut init.scope("frame_h"), d, d),
            mhca_modulated: Attention::new(&mut init.scope("mhca_mod"), d, heads, true),
            ff2: FeedForward::new(&mut init.scope("ff2"), d, mult),
            norm_out: LayerNorm::new(&mut init.scope("norm_out"), d),
        }
    }

    /// `window` restricts the second attention, whose keys are derived from
    /// the input frames, to the causal window. The context attention sees
    /// every context frame.
    pub fn trace<'t, F: Real>(
        &self,
        p: &Params<'t, F>,
        x: Var<'t, F>,
        m: Var<'t, F>,
        n: Var<'t, F>,
        window: usize,
    ) -> Result<CrossTrace<'t, F>> {
        let x_hat = self.film.forward(p, x, m)?;
        let x_tilde = self.ff1_x.half_residual(p, x_hat)?;
        let n_tilde = self.ff1_n.half_residual(p, n)?;
        let x1 = x_tilde.add(self.conv_x.forward(p, x_tilde)?)?;
        let n1 = n_tilde.add(self.conv_n.forward(p, n_tilde)?)?;
        let x2 = x1.add(self.mhca_context.forward(p, x1, Some(n1), Visibility::All)?)?;
        let r = self.frame_scale.forward(p, x2)?;
        let h = self.frame_shift.forward(p, x2)?;
        let x3 = x1.mul(r)?.add(h)?;
        let x4 = x1.add(self.mhca_modulated.forward(p, x1, Some(x3), Visibility::Causal { window })?)?;
        let output = self.norm_out.forward(p, self.ff2.half_residual(p, x4)?)?;
        Ok(CrossTrace {
            x_hat,
            x_tilde,
            n_tilde,
            x1,
            n1,
            x2,
            x3,
            x4,
            output,
        })
    }

    pub fn forward<'t, F: Real>(
        &self,
        p: &Params<'t, F>,
        x: Var<'t, F>,
        m: Var<'t, F>,
        n: Var<'t, F>,
        window: usize,
    ) -> Result<Var<'t, F>> {
        Ok(self.trace(p, x, m, n, window)?.output)
    }
}
