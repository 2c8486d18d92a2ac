use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::datagen::UtteranceExample;
use crate::error::{Error, Result};
use crate::features::Matrix;

use super::blocks::{ConformerBlock, CrossAttentionBlock, ModulatedConformerBlock};
use super::layers::Dense;
use super::params::{Init, ParamStore, Params};
use super::ArchConfig;

/// Side inputs and features of one utterance, as tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendInput<F: Real> {
    /// `[T × n_mels]` noisy LFBE.
    pub noisy: Tensor<F>,
    /// `[T × n_mels]` playback reference LFBE.
    pub reference: Tensor<F>,
    /// `[S × n_mels]` interference-only LFBE preceding the utterance.
    pub context: Tensor<F>,
    /// `[1 × dvec_dim]` speaker embedding.
    pub dvector: Tensor<F>,
}

impl<F: Real> FrontendInput<F> {
    pub fn from_example(ex: &UtteranceExample) -> Result<Self> {
        let m = |x: &Matrix| Tensor::from_f32_matrix(x.rows, x.cols, &x.values);
        Ok(Self {
            noisy: m(&ex.noisy_lfbe.values)?,
            reference: m(&ex.reference_lfbe.values)?,
            context: m(&ex.context_lfbe.values)?,
            dvector: Tensor::from_f32_matrix(1, ex.speaker_embedding.len(), &ex.speaker_embedding)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.noisy.shape()[0]
    }
}

/// Variables of a [`FrontendInput`] placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct InputVars<'t, F: Real> {
    pub noisy: Var<'t, F>,
    pub reference: Var<'t, F>,
    pub context: Var<'t, F>,
    pub dvector: Var<'t, F>,
}

impl<F: Real> FrontendInput<F> {
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> InputVars<'t, F> {
        InputVars {
            noisy: tape.constant(self.noisy.clone()),
            reference: tape.constant(self.reference.clone()),
            context: tape.constant(self.context.clone()),
            dvector: tape.constant(self.dvector.clone()),
        }
    }
}

/// Mask estimator: primary encoder over noisy and reference features,
/// noise-context encoder, cross-attention encoder and sigmoid decoder.
#[derive(Debug, Clone)]
pub struct FrontendModel<F: Real> {
    pub config: ArchConfig,
    pub params: ParamStore<F>,
    input_proj: Option<Dense>,
    primary: Vec<ModulatedConformerBlock>,
    context_proj: Option<Dense>,
    context: Vec<ConformerBlock>,
    cross: Vec<CrossAttentionBlock>,
    decoder: Dense,
}

impl<F: Real> FrontendModel<F> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let stacked = 2 * cfg.n_mels;
        let input_proj = (stacked != cfg.d_model).then(|| Dense::new(&mut init.scope("input"), stacked, cfg.d_model));
        let primary = (0..cfg.n_primary_blocks)
            .map(|i| ModulatedConformerBlock::new(&mut init.scope(format!("primary.{i}")), cfg))
            .collect();
        let (context_proj, context, cross) = if cfg.has_context() {
            (
                Some(Dense::new(&mut init.scope("context_in"), cfg.n_mels, cfg.d_model)),
                (0..cfg.n_context_blocks)
                    .map(|i| ConformerBlock::new(&mut init.scope(format!("context.{i}")), cfg))
                    .collect(),
                (0..cfg.n_cross_blocks)
                    .map(|i| CrossAttentionBlock::new(&mut init.scope(format!("cross.{i}")), cfg))
                    .collect(),
            )
        } else {
            (None, Vec::new(), Vec::new())
        };
        let decoder = Dense::new(&mut init.scope("decoder"), cfg.d_model, cfg.n_mels);
        Ok(Self {
            config,
            params,
            input_proj,
            primary,
            context_proj,
            context,
            cross,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Real>(&self) -> FrontendModel<G> {
        FrontendModel {
            config: self.config.clone(),
            params: self.params.cast(),
            input_proj: self.input_proj.clone(),
            primary: self.primary.clone(),
            context_proj: self.context_proj.clone(),
            context: self.context.clone(),
            cross: self.cross.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn check_inputs(&self, x: &InputVars<'_, F>) -> Result<()> {
        let cfg = &self.config;
        let (noisy, reference) = (x.noisy.shape(), x.reference.shape());
        if noisy.len() != 2 || noisy[1] != cfg.n_mels || noisy[0] == 0 || reference != noisy {
            return Err(Error::shape(
                "frontend",
                format!("noisy {noisy:?} and reference {reference:?} must both be [T x {}]", cfg.n_mels),
            ));
        }
        if x.dvector.shape() != [1, cfg.dvec_dim] {
            return Err(Error::shape(
                "frontend",
                format!("d-vector {:?}, expected [1, {}]", x.dvector.shape(), cfg.dvec_dim),
            ));
        }
        if cfg.has_context() {
            let ctx = x.context.shape();
            if ctx.len() != 2 || ctx[1] != cfg.n_mels {
                return Err(Error::shape("frontend", format!("context {ctx:?}, expected [S x {}]", cfg.n_mels)));
            }
            if ctx[0] == 0 {
                return Err(Error::EmptyAuxiliary);
            }
        }
        Ok(())
    }

    /// Encoded context sequence `[S × d_model]`, or `None` without a
    /// context path.
    pub fn encode_context<'t>(&self, p: &Params<'t, F>, context: Var<'t, F>) -> Result<Option<Var<'t, F>>> {
        let Some(proj) = &self.context_proj else {
            return Ok(None);
        };
        let mut n = proj.forward(p, context)?;
        for block in &self.context {
            n = block.forward(p, n, self.config.attn_window_past)?;
        }
        Ok(Some(n))
    }

    /// Mask `[T × n_mels]` in (0, 1).
    pub fn forward<'t>(&self, p: &Params<'t, F>, x: &InputVars<'t, F>) -> Result<Var<'t, F>> {
        self.check_inputs(x)?;
        let tape = x.noisy.tape();
        let stacked = tape.concat(&[x.noisy, x.reference], 1)?;
        let mut h = match &self.input_proj {
            Some(proj) => proj.forward(p, stacked)?,
            None => stacked,
        };
        let window = self.config.attn_window_past;
        for block in &self.primary {
            h = block.forward(p, h, x.dvector, window)?;
        }
        if let Some(n) = self.encode_context(p, x.context)? {
            for block in &self.cross {
                h = block.forward(p, h, x.dvector, n, window)?;
            }
        }
        self.decoder.forward(p, h)?.sigmoid()
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, input: &FrontendInput<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let mask = self.forward(&p, &input.bind(&tape))?;
        Ok((*mask.value()).clone())
    }
}

impl FrontendModel<f32> {
    pub fn predict_example(&self, ex: &UtteranceExample) -> Result<Matrix> {
        let mask = self.predict(&FrontendInput::from_example(ex)?)?;
        let (rows, cols) = mask.matrix_dims();
        Matrix::new(rows, cols, mask.into_data())
    }
}
