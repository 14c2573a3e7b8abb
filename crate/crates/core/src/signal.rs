//! Audio clips, impulse responses and the DSP primitives shared by the rest
//! of the pipeline: WAV I/O, integer-factor decimation to 8 kHz, linear
//! convolution and pointwise mixing.
//!
//! Samples are `f64` everywhere; quantization only happens at the WAV
//! boundary.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target rate of every clip that enters the separation pipeline.
pub const PIPELINE_RATE: u32 = 8000;

/// Number of taps of the anti-alias filter used by [`resample_to_8k`].
pub const RESAMPLER_TAPS: usize = 65;

const KAISER_BETA: f64 = 8.0;
const DIRECT_CONVOLUTION_LIMIT: usize = 64;

/// Mono sample sequence with its sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio clip must not be empty".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn check_rate(&self, other: u32) -> Result<()> {
        if self.sample_rate != other {
            return Err(Error::RateMismatch {
                left: self.sample_rate,
                right: other,
            });
        }
        Ok(())
    }
}

/// Finite impulse response of an acoustic path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl ImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("impulse response needs at least one tap".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("impulse response taps".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self { taps, sample_rate })
    }

    /// The unit impulse `[1]`.
    pub fn identity(sample_rate: u32) -> Self {
        Self {
            taps: vec![1.0],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Reads a PCM16 or float32 WAV file. Stereo files yield `[left, right]`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Vec<AudioClip>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedEncoding(format!("{channels} channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{format:?} {bits}-bit")));
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyPayload(path.to_path_buf()));
    }
    let clips = (0..channels)
        .map(|c| AudioClip {
            samples: interleaved.iter().skip(c).step_by(channels).copied().collect(),
            sample_rate: spec.sample_rate,
        })
        .collect();
    Ok(clips)
}

/// Loads a WAV file and keeps its first (left) channel.
pub fn load_wav_mono(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut clips = load_wav(path)?;
    Ok(clips.swap_remove(0))
}

/// Writes a 16-bit PCM mono WAV, clamping amplitudes to [-1, 1].
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &x in &clip.samples {
        writer.write_sample(quantize_pcm16(x))?;
    }
    writer.finalize()?;
    Ok(())
}

fn quantize_pcm16(x: f64) -> i16 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass, cutoff `cutoff` in cycles/sample, unit DC gain.
pub(crate) fn lowpass_taps(num_taps: usize, cutoff: f64) -> Vec<f64> {
    let center = (num_taps - 1) as f64 / 2.0;
    let norm = bessel_i0(KAISER_BETA);
    let mut taps: Vec<f64> = (0..num_taps)
        .map(|i| {
            let t = i as f64 - center;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let ratio = t / center;
            let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).max(0.0).sqrt()) / norm;
            sinc * window
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

/// Decimates a clip to 8 kHz by an integer factor after anti-alias filtering.
///
/// The filter is linear phase with an integer group delay that is removed, so
/// output sample `k` is aligned with input sample `k * factor`.
pub fn resample_to_8k(clip: &AudioClip) -> Result<AudioClip> {
    let factor = match clip.sample_rate {
        8000 => return Ok(clip.clone()),
        16000 => 2,
        48000 => 6,
        other => return Err(Error::UnsupportedRate(other)),
    };
    // Cutoff sits just below the output Nyquist frequency.
    let taps = lowpass_taps(RESAMPLER_TAPS, 0.45 / factor as f64);
    let half = (RESAMPLER_TAPS / 2) as isize;
    let n = clip.samples.len();
    let out_len = n.div_ceil(factor);
    let samples = (0..out_len)
        .map(|k| {
            let center = (k * factor) as isize;
            taps.iter()
                .enumerate()
                .filter_map(|(j, h)| {
                    let idx = center + j as isize - half;
                    (idx >= 0 && (idx as usize) < n).then(|| h * clip.samples[idx as usize])
                })
                .sum()
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: PIPELINE_RATE,
    })
}

/// Full linear convolution of two sample sequences (length `a + b - 1`).
pub fn convolve_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    if a.len().min(b.len()) <= DIRECT_CONVOLUTION_LIMIT {
        convolve_direct(a, b)
    } else {
        convolve_fft(a, b)
    }
}

fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &h) in b.iter().enumerate() {
            out[i + j] += x * h;
        }
    }
    out
}

fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let out_len = a.len() + b.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let lift = |x: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        buf.iter_mut().zip(x).for_each(|(c, &v)| c.re = v);
        buf
    };
    let mut fa = lift(a);
    let mut fb = lift(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    fa.iter_mut().zip(&fb).for_each(|(x, y)| *x *= y);
    inv.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Convolves a clip with an impulse response.
pub fn convolve(signal: &AudioClip, ir: &ImpulseResponse) -> Result<AudioClip> {
    signal.check_rate(ir.sample_rate)?;
    Ok(AudioClip {
        samples: convolve_samples(&signal.samples, &ir.taps),
        sample_rate: signal.sample_rate,
    })
}

/// Sample-wise weighted sum; shorter clips are zero-padded to the longest.
pub fn mix_pointwise(clips: &[AudioClip], gains: &[f64]) -> Result<AudioClip> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("mix of an empty clip list".into()))?;
    if clips.len() != gains.len() {
        return Err(Error::InvalidArgument(format!(
            "{} clips but {} gains",
            clips.len(),
            gains.len()
        )));
    }
    for clip in &clips[1..] {
        clip.check_rate(first.sample_rate)?;
    }
    let len = clips.iter().map(AudioClip::len).max().unwrap_or(0);
    let mut samples = vec![0.0; len];
    for (clip, &gain) in clips.iter().zip(gains) {
        samples
            .iter_mut()
            .zip(&clip.samples)
            .for_each(|(acc, x)| *acc += gain * x);
    }
    Ok(AudioClip {
        samples,
        sample_rate: first.sample_rate,
    })
}

/// Adds `b` into `a` sample-wise, growing `a` if `b` is longer.
pub(crate) fn accumulate(a: &mut Vec<f64>, b: &[f64]) {
    if b.len() > a.len() {
        a.resize(b.len(), 0.0);
    }
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 8000).unwrap()
    }

    fn naive_convolution(a: &[f64], b: &[f64]) -> Vec<f64> {
        (0..a.len() + b.len() - 1)
            .map(|n| {
                (0..a.len())
                    .filter(|&i| n >= i && n - i < b.len())
                    .map(|i| a[i] * b[n - i])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn rejects_empty_and_zero_rate() {
        assert!(AudioClip::new(vec![], 8000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        assert!(ImpulseResponse::new(vec![], 8000).is_err());
        assert!(ImpulseResponse::new(vec![f64::NAN], 8000).is_err());
    }

    #[test]
    fn convolution_examples() {
        let x = clip(vec![0.5, -0.25, 1.0]);
        let same = convolve(&x, &ImpulseResponse::identity(8000)).unwrap();
        assert_eq!(same, x);

        let shifted = convolve(&x, &ImpulseResponse::new(vec![0.0, 0.0, 1.0], 8000).unwrap()).unwrap();
        assert_eq!(shifted.samples, vec![0.0, 0.0, 0.5, -0.25, 1.0]);

        let out = convolve_samples(&[1.0, 2.0], &[1.0, 1.0]);
        assert_eq!(out, naive_convolution(&[1.0, 2.0], &[1.0, 1.0]));
        assert_eq!(out, vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn convolution_rate_mismatch() {
        let x = clip(vec![1.0]);
        let h = ImpulseResponse::identity(16000);
        assert!(matches!(convolve(&x, &h), Err(Error::RateMismatch { .. })));
    }

    #[test]
    fn fft_path_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..700).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..129).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = convolve_samples(&a, &b);
        let slow = naive_convolution(&a, &b);
        assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn convolution_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len_h in [3usize, 200] {
            let a: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..len_h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = convolve_samples(&sum, &h);
            let ca = convolve_samples(&a, &h);
            let cb = convolve_samples(&b, &h);
            for i in 0..lhs.len() {
                assert!((lhs[i] - ca[i] - cb[i]).abs() <= 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn delta_at_k_shifts_by_k(k in 0usize..40, len in 1usize..100) {
            let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut h = vec![0.0; k + 1];
            h[k] = 1.0;
            let y = convolve_samples(&x, &h);
            prop_assert_eq!(y.len(), len + k);
            prop_assert!(y[..k].iter().all(|v| *v == 0.0));
            prop_assert_eq!(&y[k..], &x[..]);
        }
    }

    #[test]
    fn mixing_examples() {
        let c = clip(vec![0.1, -0.2, 0.3]);
        assert_eq!(mix_pointwise(std::slice::from_ref(&c), &[1.0]).unwrap(), c);
        let neg = c.scaled(-1.0);
        let cancel = mix_pointwise(&[c.clone(), neg], &[1.0, 1.0]).unwrap();
        assert!(cancel.samples.iter().all(|v| *v == 0.0));
        let m = mix_pointwise(&[clip(vec![1.0, 0.0]), clip(vec![0.0, 1.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(m.samples, vec![0.5, 0.5]);
        let padded = mix_pointwise(&[clip(vec![1.0]), clip(vec![0.0, 2.0, 3.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(padded.samples, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mixing_errors() {
        assert!(mix_pointwise(&[], &[]).is_err());
        let a = clip(vec![1.0]);
        let b = AudioClip::new(vec![1.0], 16000).unwrap();
        assert!(matches!(
            mix_pointwise(&[a, b], &[1.0, 1.0]),
            Err(Error::RateMismatch { .. })
        ));
    }

    #[test]
    fn resample_identity_and_lengths() {
        let c = clip(vec![0.25; 100]);
        assert_eq!(resample_to_8k(&c).unwrap(), c);

        let wide = AudioClip::new(vec![0.0; 17460 * 2], 16000).unwrap();
        let out = resample_to_8k(&wide).unwrap();
        assert_eq!(out.len(), 17460);
        assert_eq!(out.sample_rate, 8000);

        let odd = AudioClip::new(vec![0.0; 33], 16000).unwrap();
        assert_eq!(resample_to_8k(&odd).unwrap().len(), 17);

        let high = AudioClip::new(vec![0.0; 4801], 48000).unwrap();
        assert_eq!(resample_to_8k(&high).unwrap().len(), 801);

        let bad = AudioClip::new(vec![0.0; 10], 44100).unwrap();
        assert!(matches!(resample_to_8k(&bad), Err(Error::UnsupportedRate(44100))));
    }

    #[test]
    fn resampled_sine_matches_analytic_sine() {
        let n = 16000;
        let input: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let out = resample_to_8k(&AudioClip::new(input, 16000).unwrap()).unwrap();
        let expected: Vec<f64> = (0..out.len())
            .map(|k| (2.0 * PI * 1000.0 * k as f64 / 8000.0).sin())
            .collect();
        // Steady state: skip the filter's half-length at both ends.
        let range = 64..out.len() - 64;
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&out.samples[range.clone()]) / rms(&expected[range.clone()]);
        assert!((ratio - 1.0).abs() < 0.01, "amplitude ratio {ratio}");
        for k in range {
            assert!((out.samples[k] - expected[k]).abs() < 0.01);
        }
    }

    #[test]
    fn resampler_rejects_aliasing_band() {
        // 6 kHz at 16 kHz would alias to 2 kHz after naive decimation.
        let input: Vec<f64> = (0..16000)
            .map(|i| (2.0 * PI * 6000.0 * i as f64 / 16000.0).sin())
            .collect();
        let out = resample_to_8k(&AudioClip::new(input, 16000).unwrap()).unwrap();
        let steady = &out.samples[64..out.len() - 64];
        assert!(steady.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn wav_round_trip_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = clip(samples);
        save_wav(&c, &path).unwrap();
        let back = load_wav_mono(&path).unwrap();
        assert_eq!(back.len(), 8000);
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in c.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }

        let zeros = AudioClip::zeros(10, 8000);
        save_wav(&zeros, &path).unwrap();
        assert!(load_wav_mono(&path).unwrap().samples.iter().all(|v| *v == 0.0));

        save_wav(&clip(vec![1.5, -1.5]), &path).unwrap();
        let clamped = load_wav_mono(&path).unwrap();
        assert!((clamped.samples[0] - 1.0).abs() <= 1.0 / 32768.0);
        assert_eq!(clamped.samples[1], -1.0);
    }

    #[test]
    fn wav_stereo_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for i in 0..4i16 {
            w.write_sample(i * 100).unwrap();
            w.write_sample(-i * 100).unwrap();
        }
        w.finalize().unwrap();
        let clips = load_wav(&stereo).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].samples[3], 300.0 / 32768.0);
        assert_eq!(clips[1].samples[3], -300.0 / 32768.0);

        let float = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert_eq!(load_wav_mono(&float).unwrap().samples, vec![0.5]);

        let deep = dir.path().join("d.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&deep, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&deep), Err(Error::UnsupportedEncoding(_))));

        let empty = dir.path().join("e.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        hound::WavWriter::create(&empty, spec).unwrap().finalize().unwrap();
        assert!(matches!(load_wav(&empty), Err(Error::EmptyPayload(_))));

        assert!(matches!(
            load_wav(dir.path().join("missing.wav")),
            Err(Error::MissingFile(_))
        ));
        assert!(save_wav(&clip(vec![0.0]), dir.path().join("no/such/dir/x.wav")).is_err());
    }
}
