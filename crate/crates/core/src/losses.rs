//! Training objective: spectral mask loss, frozen-encoder feature loss and
//! the step-dependent weighting between them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{stack_indices, Matrix, LOG_FLOOR, N_MELS, STACK, SUBSAMPLE};
use crate::model::{standalone, ArchConfig, ConformerBlock, Dense, ParamStore, Params};

/// `l1·mean|est − irm| + l2·mean((est − irm)²)`.
pub fn spectral_loss_weighted<'t, F: Real>(
    est_mask: Var<'t, F>,
    irm: Var<'t, F>,
    l1: f64,
    l2: f64,
) -> Result<Var<'t, F>> {
    if est_mask.shape() != irm.shape() {
        return Err(Error::shape(
            "spectral_loss",
            format!("mask {:?} vs target {:?}", est_mask.shape(), irm.shape()),
        ));
    }
    let diff = est_mask.sub(irm)?;
    let abs = diff.abs()?.mean()?.scale(F::lit(l1))?;
    let sq = diff.mul(diff)?.mean()?.scale(F::lit(l2))?;
    abs.add(sq)
}

/// Mean absolute plus mean squared mask error.
pub fn spectral_loss<'t, F: Real>(est_mask: Var<'t, F>, irm: Var<'t, F>) -> Result<Var<'t, F>> {
    spectral_loss_weighted(est_mask, irm, 1.0, 1.0)
}

/// [`spectral_loss`] evaluated directly on matrices.
pub fn spectral_loss_value(est_mask: &Matrix, irm: &Matrix) -> Result<f64> {
    est_mask.check_same_shape(irm, "spectral_loss")?;
    let n = est_mask.values.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&a, &b) in est_mask.values.iter().zip(&irm.values) {
        let d = a as f64 - b as f64;
        abs += d.abs();
        sq += d * d;
    }
    Ok(abs / n + sq / n)
}

/// `ln(max(noisy_mel ⊙ mask, floor))`: masked features as seen by the
/// feature loss during training (no mask scaling).
pub fn masked_lfbe<'t, F: Real>(noisy_mel_linear: Var<'t, F>, mask: Var<'t, F>) -> Result<Var<'t, F>> {
    noisy_mel_linear.mul(mask)?.ln_floor(F::lit(LOG_FLOOR as f64))
}

/// Stack and subsample `[T × C]` features into `[ceil(T/3) × 4C]`.
pub fn stack_var<'t, F: Real>(feats: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = feats.shape();
    if shape.len() != 2 || shape[0] < STACK {
        return Err(Error::InputTooShort(format!(
            "stacking needs at least {STACK} frames, got shape {shape:?}"
        )));
    }
    let idx = stack_indices(shape[0], STACK, SUBSAMPLE);
    let rows = idx.len() / STACK;
    feats.gather_rows(&idx)?.reshape(&[rows, STACK * shape[1]])
}

pub const FROZEN_ENCODER_SEED: u64 = 7;

/// Fixed, randomly initialised conformer encoder over stacked LFBE whose
/// output distance serves as a recogniser-feature loss. Its parameters are
/// never updated.
#[derive(Debug, Clone)]
pub struct FrozenEncoder<F: Real> {
    pub config: ArchConfig,
    pub params: ParamStore<F>,
    input: Dense,
    blocks: Vec<ConformerBlock>,
}

impl<F: Real> FrozenEncoder<F> {
    pub fn new(seed: u64) -> Self {
        let config = ArchConfig {
            d_model: 128,
            n_primary_blocks: 2,
            n_context_blocks: 0,
            n_cross_blocks: 0,
            ffn_multiplier: 4,
            ..ArchConfig::default()
        };
        let ((input, blocks), params) = standalone(seed, |init| {
            let input = Dense::new(&mut init.scope("input"), STACK * N_MELS, config.d_model);
            let blocks = (0..config.n_primary_blocks)
                .map(|i| ConformerBlock::new(&mut init.scope(format!("block{i}")), &config))
                .collect();
            (input, blocks)
        });
        Self {
            config,
            params,
            input,
            blocks,
        }
    }

    /// Encode `[T × C]` LFBE (stacked internally) to `[T′ × 128]`.
    pub fn encode<'t>(&self, p: &Params<'t, F>, lfbe: Var<'t, F>) -> Result<Var<'t, F>> {
        let mut h = self.input.forward(p, stack_var(lfbe)?)?;
        for block in &self.blocks {
            h = block.forward(p, h, self.config.attn_window_past)?;
        }
        Ok(h)
    }

    /// Encoder output without gradient tracking.
    pub fn encode_value(&self, lfbe: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.encode(&p, tape.constant(lfbe.clone()))?;
        Ok((*out.value()).clone())
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl<F: Real> Default for FrozenEncoder<F> {
    fn default() -> Self {
        Self::new(FROZEN_ENCODER_SEED)
    }
}

/// Mean squared distance between encoder outputs of enhanced and clean
/// features. `clean_encoded` is the (constant) encoding of the clean LFBE.
pub fn asr_loss_encoded<'t, F: Real>(
    enhanced_lfbe: Var<'t, F>,
    clean_encoded: &Arc<Tensor<F>>,
    enc: &FrozenEncoder<F>,
    p: &Params<'t, F>,
) -> Result<Var<'t, F>> {
    let tape = enhanced_lfbe.tape();
    let e = enc.encode(p, enhanced_lfbe)?;
    let c = tape.leaf(Arc::clone(clean_encoded), false);
    if e.shape() != c.shape() {
        return Err(Error::shape(
            "asr_loss",
            format!("enhanced encoding {:?} vs clean {:?}", e.shape(), c.shape()),
        ));
    }
    let d = e.sub(c)?;
    d.mul(d)?.mean()
}

/// Feature loss between enhanced and clean LFBE through a frozen encoder.
pub fn asr_loss<'t, F: Real>(
    enhanced_lfbe: Var<'t, F>,
    clean_lfbe: &Tensor<F>,
    enc: &FrozenEncoder<F>,
) -> Result<Var<'t, F>> {
    if enhanced_lfbe.shape() != clean_lfbe.shape() {
        return Err(Error::shape(
            "asr_loss",
            format!("enhanced {:?} vs clean {:?}", enhanced_lfbe.shape(), clean_lfbe.shape()),
        ));
    }
    let p = enc.params.bind(enhanced_lfbe.tape(), false);
    let clean = Arc::new(enc.encode_value(clean_lfbe)?);
    asr_loss_encoded(enhanced_lfbe, &clean, enc, &p)
}

/// Weight of the feature loss as a function of the training step: zero for
/// `spectral_only_steps`, then a linear ramp over `ramp_steps` up to
/// `max_asr_weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampSchedule {
    pub spectral_only_steps: u64,
    pub ramp_steps: u64,
    pub max_asr_weight: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl RampSchedule {
    pub fn desk() -> Self {
        Self {
            spectral_only_steps: 200,
            ramp_steps: 800,
            max_asr_weight: 1.0,
        }
    }

    /// Slower ramp for the jointly trained model.
    pub fn joint_slow() -> Self {
        Self {
            ramp_steps: 1800,
            ..Self::desk()
        }
    }

    pub fn paper() -> Self {
        Self {
            spectral_only_steps: 20_000,
            ramp_steps: 80_000,
            max_asr_weight: 1.0,
        }
    }

    pub fn weight(&self, step: u64) -> f64 {
        if step < self.spectral_only_steps {
            0.0
        } else if step - self.spectral_only_steps < self.ramp_steps {
            self.max_asr_weight * (step - self.spectral_only_steps) as f64 / self.ramp_steps as f64
        } else {
            self.max_asr_weight
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_asr_weight >= 0.0 && self.max_asr_weight.is_finite()) {
            return Err(Error::config("ramp.max_asr_weight", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `spectral + w(step)·asr`.
pub fn combined_loss<'t, F: Real>(
    spectral: Var<'t, F>,
    asr: Var<'t, F>,
    step: u64,
    sched: &RampSchedule,
) -> Result<Var<'t, F>> {
    spectral.add(asr.scale(F::lit(sched.weight(step)))?)
}
