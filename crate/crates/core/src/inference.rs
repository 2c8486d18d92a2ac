//! Mask scaling and application, utterance enhancement and evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Condition, Dataset, UtteranceExample};
use crate::error::{Error, Result};
use crate::features::{lfbe, stack_subsample, FeatureDomain, FeatureMatrix, Matrix, STACK, SUBSAMPLE};
use crate::model::FrontendModel;

/// Inference-time mask transform `max(mask, beta)^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.01 }
    }
}

impl MaskPolicy {
    /// The mask applied as estimated.
    pub fn unscaled() -> Self {
        Self { alpha: 1.0, beta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("policy.alpha", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("policy.beta", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Gain applied to a bin with mask value `mask`.
    pub fn factor(&self, mask: f32) -> f64 {
        (mask as f64).max(self.beta).powf(self.alpha)
    }
}

/// `noisy · max(mask, beta)^alpha`, applied to linear mel energies.
pub fn scale_and_apply(noisy_mel_linear: &FeatureMatrix, mask: &Matrix, policy: &MaskPolicy) -> Result<FeatureMatrix> {
    policy.validate()?;
    if noisy_mel_linear.domain != FeatureDomain::LinearMel {
        return Err(Error::ExpectedLinearMel);
    }
    if let Some(v) = mask.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
    }
    let values = noisy_mel_linear
        .values
        .zip_map(mask, "scale_and_apply", |x, m| (x as f64 * policy.factor(m)) as f32)?;
    FeatureMatrix::new(values, FeatureDomain::LinearMel, noisy_mel_linear.frame_hop_ms)
}

/// Enhancement result for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub mask: Matrix,
    pub enhanced_mel: FeatureMatrix,
    pub enhanced_lfbe: FeatureMatrix,
    /// Stacked and subsampled `[ceil(T/3) × 512]` recogniser input.
    pub stacked: FeatureMatrix,
}

/// Apply a given mask to an example.
pub fn enhance_with_mask(ex: &UtteranceExample, mask: Matrix, policy: &MaskPolicy) -> Result<Enhanced> {
    let enhanced_mel = scale_and_apply(&ex.noisy_mel_linear, &mask, policy)?;
    let enhanced_lfbe = lfbe(&enhanced_mel)?;
    let stacked = stack_subsample(&enhanced_lfbe, STACK, SUBSAMPLE)?;
    Ok(Enhanced {
        mask,
        enhanced_mel,
        enhanced_lfbe,
        stacked,
    })
}

pub fn enhance_utterance(model: &FrontendModel<f32>, ex: &UtteranceExample, policy: &MaskPolicy) -> Result<Enhanced> {
    enhance_with_mask(ex, model.predict_example(ex)?, policy)
}

/// Log-spectral distance: mean over frames of the per-frame RMS difference.
pub fn lsd(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "lsd")?;
    if a.rows == 0 {
        return Err(Error::InvalidArgument("lsd of an empty matrix".into()));
    }
    let total: f64 = (0..a.rows)
        .map(|t| {
            let ms = a
                .row(t)
                .iter()
                .zip(b.row(t))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                / a.cols as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / a.rows as f64)
}

pub fn mask_mae(est: &Matrix, target: &Matrix) -> Result<f64> {
    est.check_same_shape(target, "mask_mae")?;
    let sum: f64 = est
        .values
        .iter()
        .zip(&target.values)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / est.values.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub mask_mae: f64,
    pub lsd_noisy: f64,
    pub lsd_enhanced: f64,
}

pub fn score_example(ex: &UtteranceExample, mask: Matrix, policy: &MaskPolicy) -> Result<ExampleScore> {
    let mask_mae = mask_mae(&mask, &ex.irm_target)?;
    let enhanced = enhance_with_mask(ex, mask, policy)?;
    Ok(ExampleScore {
        id: ex.meta.id.clone(),
        condition: ex.condition,
        snr_db: ex.meta.snr_db,
        mask_mae,
        lsd_noisy: lsd(&ex.noisy_lfbe.values, &ex.clean_lfbe.values)?,
        lsd_enhanced: lsd(&enhanced.enhanced_lfbe.values, &ex.clean_lfbe.values)?,
    })
}

/// Averages over a group of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub n: usize,
    pub mask_mae: f64,
    pub lsd_noisy: f64,
    pub lsd_enhanced: f64,
    /// `(lsd_noisy − lsd_enhanced) / lsd_noisy`.
    pub relative_improvement: f64,
}

impl BucketStats {
    fn of<'a>(scores: impl Iterator<Item = &'a ExampleScore>) -> Self {
        let (mut n, mut mae, mut noisy, mut enh) = (0usize, 0.0, 0.0, 0.0);
        for s in scores {
            n += 1;
            mae += s.mask_mae;
            noisy += s.lsd_noisy;
            enh += s.lsd_enhanced;
        }
        let k = n.max(1) as f64;
        let (lsd_noisy, lsd_enhanced) = (noisy / k, enh / k);
        Self {
            n,
            mask_mae: mae / k,
            lsd_noisy,
            lsd_enhanced,
            relative_improvement: if lsd_noisy > 0.0 {
                (lsd_noisy - lsd_enhanced) / lsd_noisy
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrBucket {
    /// `None` for examples without interference.
    pub snr_db: Option<f64>,
    #[serde(flatten)]
    pub stats: BucketStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub overall: BucketStats,
    pub by_snr: Vec<SnrBucket>,
}

/// Evaluation metrics by condition and SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: MaskPolicy,
    pub overall: BucketStats,
    pub conditions: Vec<ConditionReport>,
    pub examples: Vec<ExampleScore>,
}

impl EvalReport {
    pub fn from_scores(policy: MaskPolicy, examples: Vec<ExampleScore>) -> Self {
        let mut by_condition: BTreeMap<Condition, Vec<&ExampleScore>> = BTreeMap::new();
        for s in &examples {
            by_condition.entry(s.condition).or_default().push(s);
        }
        let conditions = by_condition
            .into_iter()
            .map(|(condition, scores)| {
                let mut buckets: BTreeMap<Option<i64>, Vec<&ExampleScore>> = BTreeMap::new();
                for s in &scores {
                    let key = s.snr_db.map(|v| (v * 1000.0).round() as i64);
                    buckets.entry(key).or_default().push(s);
                }
                ConditionReport {
                    condition,
                    overall: BucketStats::of(scores.iter().copied()),
                    by_snr: buckets
                        .into_values()
                        .map(|b| SnrBucket {
                            snr_db: b[0].snr_db,
                            stats: BucketStats::of(b.into_iter()),
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            policy,
            overall: BucketStats::of(examples.iter()),
            conditions,
            examples,
        }
    }

    pub fn condition(&self, condition: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == condition)
    }
}

/// Score every example with masks from `mask_fn`, in parallel.
pub fn evaluate_masks<M>(dataset: &Dataset, policy: &MaskPolicy, mask_fn: M) -> Result<EvalReport>
where
    M: Fn(&UtteranceExample) -> Result<Matrix> + Sync,
{
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let scores = dataset
        .examples
        .par_iter()
        .map(|ex| score_example(ex, mask_fn(ex)?, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(*policy, scores))
}

pub fn evaluate(model: &FrontendModel<f32>, dataset: &Dataset, policy: &MaskPolicy) -> Result<EvalReport> {
    evaluate_masks(dataset, policy, |ex| model.predict_example(ex))
}
