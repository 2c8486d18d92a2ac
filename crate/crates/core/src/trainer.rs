//! Adam training loop with condition-mixed batch sampling, metric logging and
//! periodic checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datagen::{Condition, Dataset, UtteranceExample};
use crate::error::{Error, Result};
use crate::features::Matrix;
use crate::inference::mask_mae;
use crate::losses::{asr_loss_encoded, masked_lfbe, spectral_loss_weighted, FrozenEncoder, RampSchedule};
use crate::model::{save_checkpoint, FrontendInput, FrontendModel, ParamStore};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ramp: RampSchedule,
    /// Relative sampling weight per condition. Conditions present in the
    /// data but missing here get weight 1.
    pub condition_weights: BTreeMap<Condition, f64>,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Interval for held-out mask MAE; 0 evaluates only at the end.
    pub eval_every: u64,
    pub grad_clip_norm: f64,
    pub spectral_l1_weight: f64,
    pub spectral_l2_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 2000,
            ramp: RampSchedule::desk(),
            condition_weights: BTreeMap::new(),
            seed: 0,
            checkpoint_every: 500,
            eval_every: 0,
            grad_clip_norm: 5.0,
            spectral_l1_weight: 1.0,
            spectral_l2_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("adam_eps", self.adam_eps)?;
        positive("grad_clip_norm", self.grad_clip_norm)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (key, w) in [
            ("spectral_l1_weight", self.spectral_l1_weight),
            ("spectral_l2_weight", self.spectral_l2_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if let Some((c, w)) = self.condition_weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::config("condition_weights", format!("weight {w} for {c} must be non-negative")));
        }
        self.ramp.validate()
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub spectral_loss: f64,
    /// Absent while the feature loss has zero weight.
    pub asr_loss: Option<f64>,
    pub asr_weight: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub held_out_mask_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Frame-weighted spectral loss over the whole training set.
    pub initial_spectral_loss: f64,
    pub final_spectral_loss: f64,
    pub final_train_mask_mae: f64,
    pub held_out_mask_mae: Option<f64>,
    pub frozen_encoder_fingerprint: String,
    pub records: Vec<StepRecord>,
}

struct Prepared {
    input: FrontendInput<f32>,
    irm: Tensor<f32>,
    noisy_mel: Tensor<f32>,
    clean_lfbe: Tensor<f32>,
    clean_encoded: OnceLock<Arc<Tensor<f32>>>,
    frames: usize,
}

impl Prepared {
    fn new(ex: &UtteranceExample) -> Result<Self> {
        let m = |x: &Matrix| Tensor::from_f32_matrix(x.rows, x.cols, &x.values);
        Ok(Self {
            input: FrontendInput::from_example(ex)?,
            irm: m(&ex.irm_target)?,
            noisy_mel: m(&ex.noisy_mel_linear.values)?,
            clean_lfbe: m(&ex.clean_lfbe.values)?,
            clean_encoded: OnceLock::new(),
            frames: ex.frames(),
        })
    }
}

struct ExampleGrad {
    grads: Vec<Tensor<f32>>,
    spectral: f64,
    asr: Option<f64>,
}

/// Training state for one model on one dataset.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: FrontendModel<f32>,
    pub adam: AdamState,
    encoder: FrozenEncoder<f32>,
    dataset: &'d Dataset,
    prepared: Vec<Prepared>,
    pools: Vec<Vec<usize>>,
    pool_dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(model: FrontendModel<f32>, dataset: &'d Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let prepared = dataset.examples.iter().map(Prepared::new).collect::<Result<Vec<_>>>()?;
        let mut by_condition: BTreeMap<Condition, Vec<usize>> = BTreeMap::new();
        for (i, ex) in dataset.examples.iter().enumerate() {
            by_condition.entry(ex.condition).or_default().push(i);
        }
        let weights: Vec<f64> = by_condition
            .keys()
            .map(|c| config.condition_weights.get(c).copied().unwrap_or(1.0))
            .collect();
        let pool_dist = WeightedIndex::new(&weights)
            .map_err(|_| Error::config("condition_weights", "no condition in the dataset has positive weight"))?;
        Ok(Self {
            adam: AdamState::new(&model.params),
            encoder: FrozenEncoder::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pools: by_condition.into_values().collect(),
            pool_dist,
            prepared,
            dataset,
            model,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn encoder(&self) -> &FrozenEncoder<f32> {
        &self.encoder
    }

    /// Draw a condition by weight, then an example of it uniformly.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| {
                let pool = &self.pools[self.pool_dist.sample(&mut self.rng)];
                pool[self.rng.random_range(0..pool.len())]
            })
            .collect()
    }

    fn example_grad(&self, idx: usize, weight: f64, asr_weight: f64) -> Result<ExampleGrad> {
        let ex = &self.prepared[idx];
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let mask = self.model.forward(&p, &ex.input.bind(&tape))?;
        let irm = tape.constant(ex.irm.clone());
        let cfg = &self.config;
        let spectral = spectral_loss_weighted(mask, irm, cfg.spectral_l1_weight, cfg.spectral_l2_weight)?;
        let (total, asr) = if asr_weight > 0.0 {
            let clean = match ex.clean_encoded.get() {
                Some(c) => c,
                None => {
                    let enc = Arc::new(self.encoder.encode_value(&ex.clean_lfbe)?);
                    ex.clean_encoded.get_or_init(|| enc)
                }
            };
            let enc_params = self.encoder.params.bind(&tape, false);
            let enhanced = masked_lfbe(tape.constant(ex.noisy_mel.clone()), mask)?;
            let asr = asr_loss_encoded(enhanced, clean, &self.encoder, &enc_params)?;
            (spectral.add(asr.scale(asr_weight as f32)?)?, Some(asr))
        } else {
            (spectral, None)
        };
        let mut grads = tape.backward(total.scale(weight as f32)?)?;
        Ok(ExampleGrad {
            grads: p.vars().iter().map(|&v| grads.take(v)).collect(),
            spectral: spectral.value().item() as f64,
            asr: asr.map(|a| a.value().item() as f64),
        })
    }

    /// One optimisation step on the given example indices. Each example is
    /// weighted by its share of the batch's frames.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        let step = self.step;
        let w = self.config.ramp.weight(step);
        let total_frames: usize = batch.iter().map(|&i| self.prepared[i].frames).sum();
        let parts = batch
            .par_iter()
            .map(|&i| self.example_grad(i, self.prepared[i].frames as f64 / total_frames as f64, w))
            .collect::<Vec<_>>();
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let (mut spectral, mut asr) = (0.0, 0.0);
        for (part, &i) in parts.into_iter().zip(batch) {
            let part = part.map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, step },
                e => e,
            })?;
            let share = self.prepared[i].frames as f64 / total_frames as f64;
            spectral += share * part.spectral;
            asr += share * part.asr.unwrap_or(0.0);
            match &mut grads {
                None => grads = Some(part.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&part.grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let total = spectral + w * asr;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                step,
            });
        }
        let mut grads = grads.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                step,
            });
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, &self.config)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            spectral_loss: spectral,
            asr_loss: (w > 0.0).then_some(asr),
            asr_weight: w,
            total_loss: total,
            grad_norm,
            held_out_mask_mae: None,
        })
    }

    /// Frame-weighted spectral loss and mask MAE of the current model over
    /// the training set.
    pub fn training_set_metrics(&self) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let per = self
            .dataset
            .examples
            .par_iter()
            .map(|ex| {
                let mask = self.model.predict_example(ex)?;
                let (mut l1, mut l2) = (0.0, 0.0);
                for (&a, &b) in mask.values.iter().zip(&ex.irm_target.values) {
                    let d = a as f64 - b as f64;
                    l1 += d.abs();
                    l2 += d * d;
                }
                let n = mask.values.len() as f64;
                let loss = cfg.spectral_l1_weight * l1 / n + cfg.spectral_l2_weight * l2 / n;
                Ok((ex.frames() as f64, loss, l1 / n))
            })
            .collect::<Result<Vec<_>>>()?;
        let frames: f64 = per.iter().map(|p| p.0).sum();
        let loss = per.iter().map(|p| p.0 * p.1).sum::<f64>() / frames;
        let mae = per.iter().map(|p| p.0 * p.2).sum::<f64>() / frames;
        Ok((loss, mae))
    }

    /// Run `config.steps` steps. With `out_dir`, writes the metrics log and
    /// checkpoints `step-NNNNNN/` (initial, periodic and final).
    pub fn fit(&mut self, held_out: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainReport> {
        let fingerprint = self.encoder.fingerprint();
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(file), path))
            }
            None => None,
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&self.model, self.step, &checkpoint_dir(dir, self.step))?;
        }
        let (initial_spectral_loss, _) = self.training_set_metrics()?;
        let mut records = Vec::with_capacity(self.config.steps as usize);
        for _ in 0..self.config.steps {
            let batch = self.sample_batch();
            let mut rec = self.train_step(&batch)?;
            let done = self.step;
            if let Some(held) = held_out {
                if self.config.eval_every > 0 && done % self.config.eval_every == 0 {
                    rec.held_out_mask_mae = Some(held_out_mae(&self.model, held)?);
                }
            }
            if let Some((w, path)) = &mut log {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Json {
                    path: path.clone(),
                    source: e,
                })?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && done % every == 0 && done != self.config.steps {
                    save_checkpoint(&self.model, done, &checkpoint_dir(dir, done))?;
                }
            }
            records.push(rec);
        }
        if let Some((mut w, path)) = log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = out_dir {
            if self.step > 0 {
                save_checkpoint(&self.model, self.step, &checkpoint_dir(dir, self.step))?;
            }
        }
        let (final_spectral_loss, final_train_mask_mae) = self.training_set_metrics()?;
        let held_out_mask_mae = held_out.map(|h| held_out_mae(&self.model, h)).transpose()?;
        if self.encoder.fingerprint() != fingerprint {
            return Err(Error::InvalidArgument("frozen encoder parameters changed during training".into()));
        }
        Ok(TrainReport {
            steps: self.step,
            initial_spectral_loss,
            final_spectral_loss,
            final_train_mask_mae,
            held_out_mask_mae,
            frozen_encoder_fingerprint: fingerprint,
            records,
        })
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step-{step:06}"))
}

/// Mean mask MAE against the IRM over a dataset.
pub fn held_out_mae(model: &FrontendModel<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("held-out set is empty".into()));
    }
    let maes = data
        .examples
        .par_iter()
        .map(|ex| mask_mae(&model.predict_example(ex)?, &ex.irm_target))
        .collect::<Result<Vec<_>>>()?;
    Ok(maes.iter().sum::<f64>() / maes.len() as f64)
}

/// Train a model and return the report; see [`Trainer::fit`].
pub fn train(
    model: FrontendModel<f32>,
    dataset: &Dataset,
    config: TrainConfig,
    held_out: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<(FrontendModel<f32>, TrainReport)> {
    let mut trainer = Trainer::new(model, dataset, config)?;
    let report = trainer.fit(held_out, out_dir)?;
    Ok((trainer.model, report))
}
