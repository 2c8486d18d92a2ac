//! Signal generators and the parametric echo/room model.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{AudioBuffer, Matrix, SAMPLE_RATE_HZ};

pub const DVECTOR_DIM: usize = 256;

/// Peak level of generated speech surrogates.
const SPEECH_PEAK: f32 = 0.5;
/// RMS level of generated noise.
const NOISE_RMS: f64 = 0.1;
/// Energy of the reverberant tail relative to the unit direct path.
const TAIL_ENERGY: f64 = 0.5;
const IRM_EPS_DEN: f32 = 1e-12;

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Fundamental frequency of a speaker, spread over 80–250 Hz.
pub fn speaker_f0(speaker_id: u32) -> f64 {
    const GOLDEN: f64 = 0.618_033_988_749_895;
    let frac = ((speaker_id as f64 + 1.0) * GOLDEN).fract();
    80.0 + 170.0 * frac
}

pub(crate) fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE_HZ as f64).round() as usize
}

/// Deterministic speech-like signal: a harmonic series on the speaker's
/// fundamental, shaped by two formant bumps and a syllabic-rate envelope,
/// with short unvoiced noise bursts. Peak-normalised to 0.5.
pub fn synth_speech_like(seed: u64, duration_s: f64, speaker_id: u32) -> Result<AudioBuffer> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} s")));
    }
    Ok(speech_samples(seed, seconds_to_samples(duration_s), speaker_id))
}

pub(crate) fn speech_samples(seed: u64, len: usize, speaker_id: u32) -> AudioBuffer {
    let sr = SAMPLE_RATE_HZ as f64;
    let mut rng = rng_for(seed, speaker_id as u64 ^ 0x5EEC);
    let f0 = speaker_f0(speaker_id);
    let syllable_hz: f64 = rng.random_range(2.0..6.0);
    let syllable_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let formant1: f64 = rng.random_range(400.0..900.0);
    let formant2: f64 = rng.random_range(1100.0..2600.0);
    let n_harm = ((4000.0 / f0).floor() as usize).max(1);
    let harmonics: Vec<(f64, f64, f64)> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let bump = |c: f64, w: f64| (-((f - c) / w).powi(2)).exp();
            let amp = (1.0 / k as f64) * (0.3 + bump(formant1, 250.0) + 0.6 * bump(formant2, 400.0));
            (f, amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let mut out: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let env = 0.15 + 0.85 * (0.5 + 0.5 * (std::f64::consts::TAU * syllable_hz * t + syllable_phase).sin());
            let voiced: f64 = harmonics
                .iter()
                .map(|&(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            env * voiced
        })
        .collect();

    // unvoiced bursts, roughly one per syllable
    let n_bursts = ((len as f64 / sr) * syllable_hz).ceil() as usize;
    let voiced_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for _ in 0..n_bursts {
        let start = rng.random_range(0..len.max(1));
        let burst = rng.random_range(0.02..0.06) * sr;
        let mut prev = 0.0;
        for n in start..(start + burst as usize).min(len) {
            let w: f64 = rng.sample(StandardNormal);
            // first difference tilts the burst towards high frequencies
            out[n] += 0.25 * voiced_peak * (w - prev);
            prev = w;
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { SPEECH_PEAK as f64 / peak } else { 0.0 };
    AudioBuffer::new(out.into_iter().map(|v| (v * scale) as f32).collect(), SAMPLE_RATE_HZ)
        .expect("finite synthetic speech")
}

/// Stationary coloured noise: white Gaussian noise through a one-pole
/// low-pass with a seed-dependent pole, scaled to RMS 0.1.
pub fn colored_noise(seed: u64, len: usize) -> AudioBuffer {
    let mut rng = rng_for(seed, 0xC0105);
    let pole: f64 = rng.random_range(0.0..0.95);
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            state = pole * state + (1.0 - pole) * w;
            state
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }
    AudioBuffer::new(out.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE_HZ)
        .expect("finite noise")
}

/// Scale `interferer` so that `10·log10(P_target / P_scaled) = snr_db`, with
/// powers measured as full-buffer mean squares. Returns the mixture and the
/// scaled interferer.
pub fn mix_at_snr(
    target: &AudioBuffer,
    interferer: &AudioBuffer,
    snr_db: f64,
) -> Result<(AudioBuffer, AudioBuffer)> {
    let gain = snr_gain(target, interferer, snr_db)?;
    let scaled: Vec<f32> = interferer.samples().iter().map(|&s| (s as f64 * gain) as f32).collect();
    let mixture = target.samples().iter().zip(&scaled).map(|(&a, &b)| a + b).collect();
    Ok((
        AudioBuffer::new(mixture, target.sample_rate_hz())?,
        AudioBuffer::new(scaled, target.sample_rate_hz())?,
    ))
}

/// Amplitude gain applied to the interferer by [`mix_at_snr`].
pub fn snr_gain(target: &AudioBuffer, interferer: &AudioBuffer, snr_db: f64) -> Result<f64> {
    if target.len() != interferer.len() || target.sample_rate_hz() != interferer.sample_rate_hz() {
        return Err(Error::InvalidArgument(format!(
            "mix: target {} samples @ {} Hz vs interferer {} samples @ {} Hz",
            target.len(),
            target.sample_rate_hz(),
            interferer.len(),
            interferer.sample_rate_hz()
        )));
    }
    let pt = target.power();
    if pt <= 0.0 {
        return Err(Error::InvalidArgument("target has zero power".into()));
    }
    let pi = interferer.power();
    if pi <= 0.0 {
        return Err(Error::SilentInterferer);
    }
    Ok((pt / (pi * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Exponentially decaying white-noise impulse response with a unit direct
/// path and a 60 dB decay over `decay_ms`.
pub fn room_impulse_response(decay_ms: f64, seed: u64) -> Vec<f64> {
    let len = (decay_ms * SAMPLE_RATE_HZ as f64 / 1000.0).round() as usize;
    if len <= 1 {
        return vec![1.0];
    }
    let mut rng = rng_for(seed, 0x21F);
    let sigma = (TAIL_ENERGY * 6.0 * std::f64::consts::LN_10 / len as f64).sqrt();
    let mut rir = vec![1.0];
    rir.extend((1..len).map(|n| {
        let w: f64 = rng.sample(StandardNormal);
        sigma * w * 10f64.powf(-3.0 * n as f64 / len as f64)
    }));
    rir
}

/// Causal convolution truncated to the input length.
pub fn convolve_same(signal: &[f32], kernel: &[f64]) -> Vec<f32> {
    if kernel.len() == 1 {
        return signal.iter().map(|&s| (s as f64 * kernel[0]) as f32).collect();
    }
    if signal.is_empty() {
        return Vec::new();
    }
    let n = (signal.len() + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = signal.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|&k| Complex::new(k, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
    inv.process(&mut a);
    a[..signal.len()].iter().map(|c| (c.re / n as f64) as f32).collect()
}

pub fn reverberate(audio: &AudioBuffer, decay_ms: f64, seed: u64) -> AudioBuffer {
    let rir = room_impulse_response(decay_ms, seed);
    AudioBuffer::new(convolve_same(audio.samples(), &rir), audio.sample_rate_hz())
        .expect("finite reverberation")
}

/// Loudspeaker-to-microphone path: delay, gain, hard clipping at
/// `clip_level`, then room reverberation.
pub fn simulate_echo_path(
    reference: &AudioBuffer,
    delay_ms: f64,
    gain: f64,
    clip_level: f64,
    decay_ms: f64,
    seed: u64,
) -> Result<AudioBuffer> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty echo reference".into()));
    }
    let delay = (delay_ms.max(0.0) * reference.sample_rate_hz() as f64 / 1000.0).round() as usize;
    let len = reference.len();
    let driven: Vec<f32> = (0..len)
        .map(|n| {
            let x = n.checked_sub(delay).map_or(0.0, |i| reference.samples()[i] as f64);
            (gain * x).clamp(-clip_level, clip_level) as f32
        })
        .collect();
    let driven = AudioBuffer::new(driven, reference.sample_rate_hz())?;
    Ok(reverberate(&driven, decay_ms, seed))
}

/// Ideal ratio mask `X / (X + N)`; bins with `X + N < 1e−12` get 0.
pub fn compute_irm(speech_mel: &Matrix, noise_mel: &Matrix) -> Result<Matrix> {
    speech_mel.zip_map(noise_mel, "compute_irm", |x, n| {
        let den = x + n;
        if den < IRM_EPS_DEN {
            0.0
        } else {
            (x / den).clamp(0.0, 1.0)
        }
    })
}

/// Unit-norm pseudo-random speaker embedding derived from the speaker id.
pub fn synth_dvector(speaker_id: u32) -> Vec<f32> {
    let mut rng = rng_for(speaker_id as u64, 0xD7EC);
    let v: Vec<f64> = (0..DVECTOR_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Embedding used when no enrolled speaker is available.
pub fn absent_dvector() -> Vec<f32> {
    vec![0.0; DVECTOR_DIM]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peak_frequency(audio: &AudioBuffer, lo: f64, hi: f64) -> f64 {
        let n = audio.len().next_power_of_two();
        let mut buf: Vec<Complex<f64>> = audio.samples().iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df = SAMPLE_RATE_HZ as f64 / n as f64;
        let (k, _) = (((lo / df) as usize)..((hi / df) as usize))
            .map(|k| (k, buf[k].norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        k as f64 * df
    }

    #[test]
    fn speech_is_deterministic_and_sized() {
        let a = synth_speech_like(3, 2.0, 7).unwrap();
        assert_eq!(a, synth_speech_like(3, 2.0, 7).unwrap());
        assert_eq!(a.len(), 32_000);
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
        assert!(synth_speech_like(3, 0.0, 7).is_err());
    }

    #[test]
    fn speakers_differ_in_fundamental() {
        for (a, b) in [(0, 1), (2, 5), (10, 11)] {
            let fa = peak_frequency(&synth_speech_like(1, 2.0, a).unwrap(), 70.0, 260.0);
            let fb = peak_frequency(&synth_speech_like(1, 2.0, b).unwrap(), 70.0, 260.0);
            assert!((fa - speaker_f0(a)).abs() < 1.0, "{fa} vs {}", speaker_f0(a));
            assert!((fb - speaker_f0(b)).abs() < 1.0);
            assert!((fa - fb).abs() > 1.0);
        }
    }

    #[test]
    fn snr_mixing() {
        let t = synth_speech_like(1, 1.0, 0).unwrap();
        let n = colored_noise(2, t.len());
        let g = snr_gain(&t, &n, 20.0).unwrap();
        let ratio = (t.power() / n.power()).sqrt();
        assert!((g / ratio - 0.1).abs() < 1e-12);

        // equal powers at 0 dB → unit gain
        let t2 = AudioBuffer::new(n.samples().iter().map(|v| -v).collect(), 16_000).unwrap();
        assert!((snr_gain(&t2, &n, 0.0).unwrap() - 1.0).abs() < 1e-12);

        let (mix, scaled) = mix_at_snr(&t, &n, 5.0).unwrap();
        for ((m, s), x) in mix.samples().iter().zip(scaled.samples()).zip(t.samples()) {
            assert!((m - s - x).abs() <= 1e-7);
        }
        let measured = 10.0 * (t.power() / scaled.power()).log10();
        assert!((measured - 5.0).abs() < 1e-3);

        let silence = AudioBuffer::zeros(t.len(), 16_000);
        let err = mix_at_snr(&t, &silence, 0.0).unwrap_err();
        assert_eq!(err.to_string(), "cannot set SNR against silence");
    }

    #[test]
    fn echo_path_edge_cases() {
        let r = synth_speech_like(4, 0.5, 3).unwrap();
        let silent = simulate_echo_path(&r, 10.0, 0.0, 0.5, 300.0, 1).unwrap();
        assert!(silent.samples().iter().all(|&v| v == 0.0));
        let ident = simulate_echo_path(&r, 0.0, 1.7, 1.0, 0.0, 1).unwrap();
        for (a, b) in ident.samples().iter().zip(r.samples()) {
            assert_eq!(*a, (1.7 * *b as f64) as f32);
        }
        let delayed = simulate_echo_path(&r, 10.0, 1.0, 1.0, 0.0, 1).unwrap();
        assert!(delayed.samples()[..160].iter().all(|&v| v == 0.0));
        assert_eq!(delayed.samples()[160], r.samples()[0]);
    }

    #[test]
    fn clipping_creates_odd_harmonics() {
        let f = 250.0;
        let s: Vec<f32> = (0..16_384)
            .map(|n| (0.5 * (std::f64::consts::TAU * f * n as f64 / 16_000.0).sin()) as f32)
            .collect();
        let sine = AudioBuffer::new(s, 16_000).unwrap();
        let harmonic_energy = |a: &AudioBuffer| {
            let n = a.len();
            let mut buf: Vec<Complex<f64>> = a.samples().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            // 750 Hz falls exactly on bin 768
            buf[768].norm_sqr()
        };
        let clean = simulate_echo_path(&sine, 0.0, 1.0, 1.0, 0.0, 0).unwrap();
        let clipped = simulate_echo_path(&sine, 0.0, 2.0, 0.4, 0.0, 0).unwrap();
        assert!(harmonic_energy(&clean) < 1e-6);
        assert!(harmonic_energy(&clipped) > 1.0);
    }

    #[test]
    fn reverb_has_unit_direct_path() {
        let rir = room_impulse_response(300.0, 9);
        assert_eq!(rir.len(), 4800);
        assert_eq!(rir[0], 1.0);
        let tail: f64 = rir[1..].iter().map(|v| v * v).sum();
        assert!((tail - TAIL_ENERGY).abs() < 0.15, "{tail}");
        assert_eq!(room_impulse_response(0.0, 9), vec![1.0]);
        // FFT convolution agrees with the direct sum
        let x: Vec<f32> = (0..300).map(|i| ((i * 37) % 17) as f32 / 17.0 - 0.5).collect();
        let k = &rir[..50];
        let fast = convolve_same(&x, k);
        for n in [0, 1, 49, 120, 299] {
            let direct: f64 = (0..=n.min(49)).map(|j| k[j] * x[n - j] as f64).sum();
            assert!((fast[n] as f64 - direct).abs() < 1e-5);
        }
    }

    #[test]
    fn irm_values() {
        let x = Matrix::new(1, 4, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let n = Matrix::new(1, 4, vec![0.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(compute_irm(&x, &n).unwrap().values, vec![1.0, 0.5, 0.75, 0.0]);
        assert!(compute_irm(&x, &Matrix::filled(2, 4, 0.0)).is_err());
    }

    #[test]
    fn dvectors() {
        let a = synth_dvector(5);
        assert_eq!(a, synth_dvector(5));
        assert_eq!(a.len(), DVECTOR_DIM);
        let mut worst = 0.0f64;
        for i in 0..100u32 {
            let (u, v) = (synth_dvector(2 * i), synth_dvector(2 * i + 1));
            let norm: f64 = u.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
            let cos: f64 = u.iter().zip(&v).map(|(a, b)| *a as f64 * *b as f64).sum();
            worst = worst.max(cos.abs());
        }
        assert!(worst < 0.5, "{worst}");
        assert!(absent_dvector().iter().all(|&v| v == 0.0));
    }
}
