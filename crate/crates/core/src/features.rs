//! Waveform → log mel-filterbank energy (LFBE) features.
//!
//! 32 ms Hann windows with a 10 ms hop at 16 kHz, a 128-band HTK mel
//! filterbank over 125–7500 Hz, natural-log compression with a 1e−10 floor,
//! and the 4-frame stacking / 3× subsampling used by the downstream
//! recogniser.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const N_MELS: usize = 128;
pub const WINDOW_MS: f32 = 32.0;
pub const HOP_MS: f32 = 10.0;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
/// Floor applied before the log so that silence maps to a finite constant.
pub const LOG_FLOOR: f32 = 1e-10;
pub const STACK: usize = 4;
pub const SUBSAMPLE: usize = 3;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean square over the whole buffer.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.samples.len() as f64
    }

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Read a mono 16-bit PCM `.wav`, or raw little-endian float32 (`.f32`,
    /// `.raw`) assumed to be at [`SAMPLE_RATE_HZ`].
    pub fn read(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("wav") => {
                let mut reader = hound::WavReader::open(path)?;
                let spec = reader.spec();
                if spec.channels != 1
                    || spec.bits_per_sample != 16
                    || spec.sample_format != hound::SampleFormat::Int
                {
                    return Err(Error::InvalidArgument(format!(
                        "{}: expected mono 16-bit PCM, got {} ch / {} bit",
                        path.display(),
                        spec.channels,
                        spec.bits_per_sample
                    )));
                }
                let samples = reader
                    .samples::<i16>()
                    .map(|s| s.map(|v| v as f32 / 32768.0))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Self::new(samples, spec.sample_rate)
            }
            Some("f32") | Some("raw") => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                Self::new(read_f32_le(&bytes, path)?, SAMPLE_RATE_HZ)
            }
            _ => Err(Error::InvalidArgument(format!(
                "{}: unsupported audio extension (expected .wav, .f32 or .raw)",
                path.display()
            ))),
        }
    }

    /// Write as mono 16-bit PCM WAV (samples clipped to [−1, 1]).
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

pub(crate) fn read_f32_le(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Dense row-major `[rows × cols]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("[{rows} x {cols}] needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDomain {
    LinearMel,
    LogMel,
}

/// `[frames × channels]` features tagged with their domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub domain: FeatureDomain,
    pub frame_hop_ms: f32,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, domain: FeatureDomain, frame_hop_ms: f32) -> Result<Self> {
        if domain == FeatureDomain::LinearMel {
            if let Some(v) = values.values.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "linear-mel features must be finite and non-negative, found {v}"
                )));
            }
        }
        Ok(Self {
            values,
            domain,
            frame_hop_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }
}

/// Complex STFT, `[frames × bins]` row-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub n_fft: usize,
    pub sample_rate_hz: u32,
    pub hop_ms: f32,
    pub data: Vec<Complex<f32>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f32>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Number of STFT frames for `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    (len >= window && window > 0 && hop > 0).then(|| (len - window) / hop + 1)
}

fn ms_to_samples(ms: f32, sample_rate_hz: u32) -> usize {
    (ms as f64 * sample_rate_hz as f64 / 1000.0).round() as usize
}

/// Frames produced for `seconds` of audio at the default DSP settings.
pub fn frames_for_seconds(seconds: f64) -> usize {
    let len = (seconds * SAMPLE_RATE_HZ as f64).round() as usize;
    frame_count(
        len,
        ms_to_samples(WINDOW_MS, SAMPLE_RATE_HZ),
        ms_to_samples(HOP_MS, SAMPLE_RATE_HZ),
    )
    .unwrap_or(0)
}

/// Short-time Fourier transform with a periodic Hann window; the FFT size
/// is the next power of two at or above the window length.
pub fn stft(audio: &AudioBuffer, window_ms: f32, hop_ms: f32) -> Result<Spectrogram> {
    let sr = audio.sample_rate_hz();
    let window = ms_to_samples(window_ms, sr);
    let hop = ms_to_samples(hop_ms, sr);
    if window == 0 || hop == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window_ms} ms / hop {hop_ms} ms round to zero samples"
        )));
    }
    let frames = frame_count(audio.len(), window, hop).ok_or_else(|| {
        Error::InputTooShort(format!("{} samples < {window}-sample window", audio.len()))
    })?;
    let n_fft = window.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let hann: Vec<f32> = (0..window)
        .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos()) as f32)
        .collect();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let chunk = &audio.samples()[t * hop..t * hop + window];
        for (dst, (&s, &w)) in buf.iter_mut().zip(chunk.iter().zip(&hann)) {
            *dst = Complex::new(s * w, 0.0);
        }
        buf[window..].iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        n_fft,
        sample_rate_hz: sr,
        hop_ms,
        data,
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK mel filters `[n_mels × (n_fft/2 + 1)]` spanning
/// 125–7500 Hz, unit peak.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Result<Matrix> {
    if n_mels < 1 {
        return Err(Error::InvalidArgument("n_mels must be at least 1".into()));
    }
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut values = vec![0.0f32; n_mels * bins];
    for c in 0..n_mels {
        let (left, center, right) = (edges[c], edges[c + 1], edges[c + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            values[c * bins + k] = w as f32;
        }
    }
    Matrix::new(n_mels, bins, values)
}

/// Mel-filterbank power: `values[t, c] = Σ_f filter_c(f) · |spec[t, f]|²`.
pub fn mel_energies(spec: &Spectrogram, n_mels: usize) -> Result<FeatureMatrix> {
    let fb = mel_filterbank(n_mels, spec.n_fft, spec.sample_rate_hz)?;
    let mut values = Vec::with_capacity(spec.frames * n_mels);
    let mut power = vec![0.0f64; spec.bins];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr() as f64;
        }
        for c in 0..n_mels {
            let e: f64 = fb.row(c).iter().zip(&power).map(|(&w, &p)| w as f64 * p).sum();
            values.push(e as f32);
        }
    }
    FeatureMatrix::new(
        Matrix::new(spec.frames, n_mels, values)?,
        FeatureDomain::LinearMel,
        spec.hop_ms,
    )
}

/// `ln(max(mel, LOG_FLOOR))`.
pub fn lfbe(mel: &FeatureMatrix) -> Result<FeatureMatrix> {
    if mel.domain != FeatureDomain::LinearMel {
        return Err(Error::ExpectedLinearMel);
    }
    let values = mel.values.values.iter().map(|&v| log_compress(v)).collect();
    Ok(FeatureMatrix {
        values: Matrix::new(mel.values.rows, mel.values.cols, values)?,
        domain: FeatureDomain::LogMel,
        frame_hop_ms: mel.frame_hop_ms,
    })
}

pub fn log_compress(v: f32) -> f32 {
    v.max(LOG_FLOOR).ln()
}

/// Linear mel energies of a waveform at the default settings.
pub fn mel_from_audio(audio: &AudioBuffer) -> Result<FeatureMatrix> {
    mel_energies(&stft(audio, WINDOW_MS, HOP_MS)?, N_MELS)
}

pub fn lfbe_from_audio(audio: &AudioBuffer) -> Result<FeatureMatrix> {
    lfbe(&mel_from_audio(audio)?)
}

/// Source frame of each stacked slot: output frame `k` gathers input frames
/// `subsample·k .. subsample·k + stack`, clamped to the last frame.
pub fn stack_indices(frames: usize, stack: usize, subsample: usize) -> Vec<usize> {
    let out = frames.div_ceil(subsample);
    (0..out)
        .flat_map(|k| (0..stack).map(move |j| (k * subsample + j).min(frames - 1)))
        .collect()
}

/// Stack `stack` consecutive frames and keep every `subsample`-th.
pub fn stack_subsample(feats: &FeatureMatrix, stack: usize, subsample: usize) -> Result<FeatureMatrix> {
    let (frames, cols) = feats.values.shape();
    if stack == 0 || subsample == 0 {
        return Err(Error::InvalidArgument("stack and subsample must be positive".into()));
    }
    if frames < stack {
        return Err(Error::InputTooShort(format!("{frames} frames < stack of {stack}")));
    }
    let idx = stack_indices(frames, stack, subsample);
    let mut values = Vec::with_capacity(idx.len() * cols);
    for &i in &idx {
        values.extend_from_slice(feats.values.row(i));
    }
    Ok(FeatureMatrix {
        values: Matrix::new(idx.len() / stack, stack * cols, values)?,
        domain: feats.domain,
        frame_hop_ms: feats.frame_hop_ms * subsample as f32,
    })
}
