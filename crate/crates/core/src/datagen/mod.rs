//! Synthetic interference scenes and training examples.
//!
//! Every example is a pure function of `(SceneConfig, condition, seed)`:
//! the seed fixes the target utterance and speaker, `SceneConfig::seed`
//! fixes the interferer and room. Noisy features are formed in the mel
//! domain as `X + N`, so the ideal ratio mask recovers `X` exactly.

mod dataset;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, write_dataset, Dataset};
pub use synth::{
    absent_dvector, colored_noise, compute_irm, convolve_same, mix_at_snr, mix_seed, reverberate,
    room_impulse_response, simulate_echo_path, snr_gain, speaker_f0, synth_dvector, synth_speech_like,
    DVECTOR_DIM,
};

use crate::error::{Error, Result};
use crate::features::{
    lfbe, mel_from_audio, AudioBuffer, FeatureDomain, FeatureMatrix, Matrix, LOG_FLOOR, N_MELS,
};

/// Seconds of interference-only audio preceding each utterance.
pub const CONTEXT_SECONDS: f64 = 6.0;
pub const MAX_REVERB_DECAY_MS: f64 = 900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Echo,
    Noise,
    Multispeaker,
    Clean,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Echo,
        Condition::Noise,
        Condition::Multispeaker,
        Condition::Clean,
    ];
    pub const INTERFERENCE: [Condition; 3] = [Condition::Echo, Condition::Noise, Condition::Multispeaker];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Echo => "echo",
            Condition::Noise => "noise",
            Condition::Multispeaker => "multispeaker",
            Condition::Clean => "clean",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown condition `{s}`")))
    }
}

/// Concrete parameters of one rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub snr_db: f64,
    pub reverb_decay_ms: f64,
    pub echo_delay_ms: f64,
    pub echo_gain: f64,
    pub clip_level: f64,
    pub utterance_seconds: f64,
    pub context_seconds: f64,
    pub n_speakers: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            snr_db: 0.0,
            reverb_decay_ms: 300.0,
            echo_delay_ms: 20.0,
            echo_gain: 1.0,
            clip_level: 0.6,
            utterance_seconds: 1.0,
            context_seconds: CONTEXT_SECONDS,
            n_speakers: 64,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db", "must be finite"));
        }
        if !(0.0..=MAX_REVERB_DECAY_MS).contains(&self.reverb_decay_ms) {
            return Err(Error::config("reverb_decay_ms", "must lie in [0, 900]"));
        }
        if !(self.clip_level > 0.0 && self.clip_level <= 1.0) {
            return Err(Error::config("clip_level", "must lie in (0, 1]"));
        }
        if !(self.echo_delay_ms >= 0.0 && self.echo_gain >= 0.0) {
            return Err(Error::config("echo_delay_ms/echo_gain", "must be non-negative"));
        }
        // the stacked recogniser input needs at least four frames
        if !(self.utterance_seconds >= 0.062) {
            return Err(Error::config("utterance_seconds", "must be at least 0.062 s"));
        }
        if !(self.context_seconds >= 0.032) {
            return Err(Error::config("context_seconds", "must be at least one window"));
        }
        if self.n_speakers < 2 {
            return Err(Error::config("n_speakers", "must be at least 2"));
        }
        Ok(())
    }
}

/// Identification carried alongside an example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub snr_db: Option<f64>,
    pub speaker_id: u32,
    pub seed: u64,
}

/// One training / evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceExample {
    pub noisy_lfbe: FeatureMatrix,
    pub reference_lfbe: FeatureMatrix,
    pub context_lfbe: FeatureMatrix,
    pub speaker_embedding: Vec<f32>,
    pub irm_target: Matrix,
    pub noisy_mel_linear: FeatureMatrix,
    pub clean_lfbe: FeatureMatrix,
    pub condition: Condition,
    pub meta: ExampleMeta,
}

impl UtteranceExample {
    pub fn frames(&self) -> usize {
        self.noisy_lfbe.frames()
    }

    /// Check the structural invariants of an example.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let bad = |msg: String| Err(Error::Dataset(format!("{}: {msg}", self.meta.id)));
        for (name, m) in [
            ("noisy_lfbe", &self.noisy_lfbe.values),
            ("reference_lfbe", &self.reference_lfbe.values),
            ("irm_target", &self.irm_target),
            ("noisy_mel_linear", &self.noisy_mel_linear.values),
            ("clean_lfbe", &self.clean_lfbe.values),
        ] {
            if m.shape() != (t, N_MELS) {
                return bad(format!("{name} has shape {:?}, expected ({t}, {N_MELS})", m.shape()));
            }
        }
        if self.context_lfbe.channels() != N_MELS || self.context_lfbe.frames() == 0 {
            return bad(format!("context_lfbe has shape {:?}", self.context_lfbe.values.shape()));
        }
        if self.speaker_embedding.len() != DVECTOR_DIM {
            return bad(format!("speaker_embedding has {} entries", self.speaker_embedding.len()));
        }
        let norm: f64 = self.speaker_embedding.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm != 0.0 && (norm - 1.0).abs() > 1e-4 {
            return bad(format!("speaker_embedding norm {norm}"));
        }
        if let Some(v) = self.irm_target.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("irm value {v} outside [0, 1]"));
        }
        if self.noisy_mel_linear.domain != FeatureDomain::LinearMel
            || self.noisy_mel_linear.values.values.iter().any(|&v| v < 0.0)
        {
            return bad("noisy_mel_linear must be non-negative linear mel".into());
        }
        let silent = LOG_FLOOR.ln();
        if self.condition != Condition::Echo && self.reference_lfbe.values.values.iter().any(|&v| v != silent) {
            return bad("reference must be the all-zero signal outside the echo condition".into());
        }
        Ok(())
    }
}

/// Waveforms behind one example, before feature extraction.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Reverberant target speech.
    pub speech: AudioBuffer,
    /// Interference aligned with the utterance, scaled to the target SNR.
    pub interference: AudioBuffer,
    pub mixture: AudioBuffer,
    /// Scaled interference immediately preceding the utterance.
    pub context: AudioBuffer,
    /// Playback reference aligned with the utterance (zeros if none).
    pub reference: AudioBuffer,
    pub speaker_id: u32,
    pub interferer_gain: f64,
}

const SALT_SPEAKER: u64 = 0x5A1;
const SALT_TARGET_RIR: u64 = 0x7A2;
const SALT_INTERFERER: u64 = 0x1F3;
const SALT_INTERFERER_RIR: u64 = 0x1F4;
const SALT_ECHO_RIR: u64 = 0xEC5;

/// Render the waveforms of a scene.
pub fn render_scene(cfg: &SceneConfig, condition: Condition, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let utt_len = synth::seconds_to_samples(cfg.utterance_seconds);
    let ctx_len = synth::seconds_to_samples(cfg.context_seconds);
    let total = ctx_len + utt_len;

    let mut speaker_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SPEAKER));
    let speaker_id = speaker_rng.random_range(0..cfg.n_speakers);
    let dry = synth::speech_samples(seed, utt_len, speaker_id);
    let speech = reverberate(&dry, cfg.reverb_decay_ms, mix_seed(cfg.seed, SALT_TARGET_RIR));

    let mut scene_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_INTERFERER));
    let other_speaker = (speaker_id + 1 + scene_rng.random_range(0..cfg.n_speakers - 1)) % cfg.n_speakers;
    let interferer_seed: u64 = scene_rng.random();
    let (interferer, reference_full) = match condition {
        Condition::Clean => (AudioBuffer::zeros(total, speech.sample_rate_hz()), None),
        Condition::Noise => (colored_noise(interferer_seed, total), None),
        Condition::Multispeaker => {
            let talker = synth::speech_samples(interferer_seed, total, other_speaker);
            let rir_seed = mix_seed(cfg.seed, SALT_INTERFERER_RIR);
            (reverberate(&talker, cfg.reverb_decay_ms, rir_seed), None)
        }
        Condition::Echo => {
            let playback = synth::speech_samples(interferer_seed, total, other_speaker);
            let echo = simulate_echo_path(
                &playback,
                cfg.echo_delay_ms,
                cfg.echo_gain,
                cfg.clip_level,
                cfg.reverb_decay_ms,
                mix_seed(cfg.seed, SALT_ECHO_RIR),
            )?;
            (echo, Some(playback))
        }
    };

    let context_raw = interferer.slice(0, ctx_len)?;
    let segment = interferer.slice(ctx_len, utt_len)?;
    let (mixture, interference, gain) = if condition == Condition::Clean {
        (speech.clone(), segment, 0.0)
    } else {
        let gain = snr_gain(&speech, &segment, cfg.snr_db)?;
        let (mixture, scaled) = mix_at_snr(&speech, &segment, cfg.snr_db)?;
        (mixture, scaled, gain)
    };
    let context = AudioBuffer::new(
        context_raw
            .samples()
            .iter()
            .map(|&s| (s as f64 * gain) as f32)
            .collect(),
        speech.sample_rate_hz(),
    )?;
    let reference = match reference_full {
        Some(r) => r.slice(ctx_len, utt_len)?,
        None => AudioBuffer::zeros(utt_len, speech.sample_rate_hz()),
    };
    Ok(Scene {
        speech,
        interference,
        mixture,
        context,
        reference,
        speaker_id,
        interferer_gain: gain,
    })
}

/// Render a scene and extract every feature stream of an example.
pub fn make_example(cfg: &SceneConfig, condition: Condition, seed: u64) -> Result<UtteranceExample> {
    let scene = render_scene(cfg, condition, seed)?;
    let speech_mel = mel_from_audio(&scene.speech)?;
    let noise_mel = mel_from_audio(&scene.interference)?;
    let noisy = speech_mel
        .values
        .zip_map(&noise_mel.values, "noisy_mel", |x, n| x + n)?;
    let irm_target = if condition == Condition::Clean {
        Matrix::filled(noisy.rows, noisy.cols, 1.0)
    } else {
        compute_irm(&speech_mel.values, &noise_mel.values)?
    };
    let noisy_mel_linear = FeatureMatrix::new(noisy, FeatureDomain::LinearMel, speech_mel.frame_hop_ms)?;
    Ok(UtteranceExample {
        noisy_lfbe: lfbe(&noisy_mel_linear)?,
        reference_lfbe: lfbe(&mel_from_audio(&scene.reference)?)?,
        context_lfbe: lfbe(&mel_from_audio(&scene.context)?)?,
        speaker_embedding: synth_dvector(scene.speaker_id),
        irm_target,
        noisy_mel_linear,
        clean_lfbe: lfbe(&speech_mel)?,
        condition,
        meta: ExampleMeta {
            id: format!("{condition}-{seed:016x}-{:016x}", cfg.seed),
            snr_db: (condition != Condition::Clean).then_some(cfg.snr_db),
            speaker_id: scene.speaker_id,
            seed,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Corpus-level generator: draws a [`SceneConfig`] per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub conditions: Vec<Condition>,
    pub train_per_condition: usize,
    pub eval_per_condition: usize,
    /// Renderings of each target utterance under different scenes.
    pub copies_per_utterance: usize,
    /// SNRs are cycled through this list.
    pub snr_db_choices: Vec<f64>,
    pub utterance_seconds: [f64; 2],
    pub context_seconds: f64,
    pub reverb_decay_ms: [f64; 2],
    pub echo_delay_ms: [f64; 2],
    pub echo_gain: [f64; 2],
    pub clip_level: [f64; 2],
    pub n_speakers: u32,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            conditions: Condition::INTERFERENCE.to_vec(),
            train_per_condition: 512,
            eval_per_condition: 64,
            copies_per_utterance: 1,
            snr_db_choices: vec![-5.0, 0.0, 5.0],
            utterance_seconds: [1.0, 1.5],
            context_seconds: CONTEXT_SECONDS,
            reverb_decay_ms: [0.0, 600.0],
            echo_delay_ms: [0.0, 40.0],
            echo_gain: [0.6, 1.6],
            clip_level: [0.3, 1.0],
            n_speakers: 64,
        }
    }
}

fn check_range(key: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::config(key, format!("invalid range {r:?}")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::config("conditions", "must not be empty"));
        }
        if self.copies_per_utterance == 0 {
            return Err(Error::config("copies_per_utterance", "must be at least 1"));
        }
        if self.snr_db_choices.is_empty() || self.snr_db_choices.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("snr_db_choices", "must be a non-empty list of finite values"));
        }
        for (key, r) in [
            ("utterance_seconds", self.utterance_seconds),
            ("reverb_decay_ms", self.reverb_decay_ms),
            ("echo_delay_ms", self.echo_delay_ms),
            ("echo_gain", self.echo_gain),
            ("clip_level", self.clip_level),
        ] {
            check_range(key, r)?;
        }
        if self.reverb_decay_ms[0] < 0.0 || self.reverb_decay_ms[1] > MAX_REVERB_DECAY_MS {
            return Err(Error::config("reverb_decay_ms", "must lie within [0, 900]"));
        }
        // a representative scene catches the remaining per-scene limits
        self.scene(Split::Train, self.conditions[0], 0).0.validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_condition,
            Split::Eval => self.eval_per_condition,
        }
    }

    /// Scene parameters and utterance seed of example `index` of a condition.
    pub fn scene(&self, split: Split, condition: Condition, index: usize) -> (SceneConfig, u64) {
        let split_salt = match split {
            Split::Train => 0x7A,
            Split::Eval => 0xE7,
        };
        let base = mix_seed(mix_seed(self.seed, split_salt), condition as u64 + 1);
        let utterance = (index / self.copies_per_utterance) as u64;
        let utterance_seed = mix_seed(base, utterance);
        let scene_seed = mix_seed(base ^ 0x5CE4E, index as u64);
        let mut utt_rng = ChaCha8Rng::seed_from_u64(utterance_seed);
        let utterance_seconds = draw(&mut utt_rng, self.utterance_seconds);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let cfg = SceneConfig {
            snr_db: self.snr_db_choices[index % self.snr_db_choices.len()],
            reverb_decay_ms: draw(&mut rng, self.reverb_decay_ms),
            echo_delay_ms: draw(&mut rng, self.echo_delay_ms),
            echo_gain: draw(&mut rng, self.echo_gain),
            clip_level: draw(&mut rng, self.clip_level),
            utterance_seconds,
            context_seconds: self.context_seconds,
            n_speakers: self.n_speakers,
            seed: scene_seed,
        };
        (cfg, utterance_seed)
    }

    /// Generate a split; examples are grouped by condition in config order.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let jobs: Vec<(Condition, usize)> = self
            .conditions
            .iter()
            .flat_map(|&c| (0..self.count(split)).map(move |i| (c, i)))
            .collect();
        let examples = jobs
            .par_iter()
            .map(|&(condition, index)| {
                let (cfg, seed) = self.scene(split, condition, index);
                let mut ex = make_example(&cfg, condition, seed)?;
                ex.meta.id = format!("{}-{condition}-{index:05}", split_name(split));
                Ok(ex)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { examples })
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}
