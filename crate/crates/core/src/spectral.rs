//! STFT analysis and overlap-add synthesis, log-magnitude features, ideal
//! binary masks and mask-based resynthesis.
//!
//! Frames start at sample 0 and step by `hop`; the signal is zero-padded at
//! the end so that the frame count is `ceil(len / hop)`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioClip;

/// Floor added to magnitudes before taking the logarithm.
pub const LOG_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    /// 32 ms Hanning window with 75% overlap at 8 kHz.
    fn default() -> Self {
        Self {
            window_len: 256,
            hop: 64,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Hanning window without zero end points: `0.5 - 0.5 cos(2π(i+1)/(N+1))`.
    ///
    /// Every tap is positive, so overlap-add normalization is well defined at
    /// the first and last samples of the signal.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 1.0) / (n + 1.0)).cos())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 4 || !self.window_len.is_multiple_of(4) || self.hop * 4 != self.window_len {
            return Err(Error::InvalidArgument(format!(
                "stft needs hop == window_len / 4, got window {} hop {}",
                self.window_len, self.hop
            )));
        }
        Ok(())
    }

    /// Sum of squared shifted windows at every sample of a signal of `len`
    /// samples; the overlap-add normalizer.
    pub fn synthesis_normalizer(&self, len: usize) -> Vec<f64> {
        let window = self.window();
        let frames = self.frames_for(len);
        let mut norm = vec![0.0; frames * self.hop + self.window_len - self.hop];
        for frame in 0..frames {
            let start = frame * self.hop;
            for (i, w) in window.iter().enumerate() {
                norm[start + i] += w * w;
            }
        }
        norm.truncate(len);
        norm
    }
}

/// Complex time-frequency matrix, `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
    pub original_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = (self.config.frames_for(self.original_len), self.config.bins());
        if self.data.dim() != expected {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram is {:?}, config implies {:?}",
                self.data.dim(),
                expected
            )));
        }
        Ok(())
    }

    /// Diagnostic dump with one `frame,bin,re,im` row per cell.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "frame,bin,re,im")?;
        for ((t, f), c) in self.data.indexed_iter() {
            writeln!(out, "{t},{f},{},{}", c.re, c.im)?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Transforms {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn transforms(len: usize) -> Transforms {
    let mut planner = FftPlanner::new();
    Transforms {
        forward: planner.plan_fft_forward(len),
        inverse: planner.plan_fft_inverse(len),
    }
}

pub fn stft(clip: &AudioClip, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    clip.check_rate(config.sample_rate)?;
    let n = clip.len();
    let frames = config.frames_for(n);
    let bins = config.bins();
    let window = config.window();
    let fft = transforms(config.window_len).forward;
    let mut data = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); config.window_len];
    for (frame, mut row) in data.rows_mut().into_iter().enumerate() {
        let start = frame * config.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = clip.samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        row.iter_mut().zip(&buf).for_each(|(dst, src)| *dst = *src);
    }
    Ok(Spectrogram {
        data,
        config: *config,
        original_len: n,
    })
}

/// Weighted overlap-add inverse, truncated to the original length.
pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    spec.validate()?;
    let config = &spec.config;
    let size = config.window_len;
    let window = config.window();
    let ifft = transforms(size).inverse;
    let padded = spec.frames() * config.hop + size - config.hop;
    let mut out = vec![0.0; padded];
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    for (frame, row) in spec.data.rows().into_iter().enumerate() {
        // Rebuild the Hermitian-symmetric full spectrum.
        for (k, c) in row.iter().enumerate() {
            buf[k] = *c;
        }
        buf[0].im = 0.0;
        buf[size / 2].im = 0.0;
        for k in 1..size / 2 {
            buf[size - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        let start = frame * config.hop;
        for (i, c) in buf.iter().enumerate() {
            out[start + i] += window[i] * c.re / size as f64;
        }
    }
    let norm = config.synthesis_normalizer(spec.original_len);
    out.truncate(spec.original_len);
    out.iter_mut().zip(&norm).for_each(|(x, w)| *x /= w);
    Ok(AudioClip {
        samples: out,
        sample_rate: config.sample_rate,
    })
}

/// `ln(|X| + ε)` per cell.
pub fn log_magnitude(spec: &Spectrogram) -> Array2<f64> {
    spec.data.mapv(|c| (c.norm() + LOG_EPSILON).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Binary,
    Soft,
}

/// One `frames × bins` mask per speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Array2<f64>>,
    pub kind: MaskKind,
}

impl MaskSet {
    pub fn speakers(&self) -> usize {
        self.masks.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.masks.first().map(|m| m.dim()).unwrap_or((0, 0))
    }

    /// Largest deviation of the per-bin speaker sum from 1.
    pub fn partition_error(&self) -> f64 {
        let mut sum = Array2::<f64>::zeros(self.dim());
        for m in &self.masks {
            sum += m;
        }
        sum.iter().fold(0.0, |acc, s| acc.max((s - 1.0).abs()))
    }
}

/// Assigns each bin to the speaker with the strictly largest magnitude; ties
/// go to the lowest speaker index.
pub fn ideal_binary_mask(gts_specs: &[Spectrogram]) -> Result<MaskSet> {
    let first = gts_specs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no ground-truth spectrograms".into()))?;
    let dim = first.data.dim();
    if let Some(bad) = gts_specs.iter().find(|s| s.data.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", bad.data.dim(), dim)));
    }
    let mags: Vec<Array2<f64>> = gts_specs.iter().map(Spectrogram::magnitudes).collect();
    let mut masks = vec![Array2::<f64>::zeros(dim); gts_specs.len()];
    for t in 0..dim.0 {
        for f in 0..dim.1 {
            let mut best = 0;
            for (i, m) in mags.iter().enumerate().skip(1) {
                if m[[t, f]] > mags[best][[t, f]] {
                    best = i;
                }
            }
            masks[best][[t, f]] = 1.0;
        }
    }
    Ok(MaskSet {
        masks,
        kind: MaskKind::Binary,
    })
}

/// Applies a real mask to the mixture spectrogram (keeping mixture phase) and
/// inverts it.
pub fn mask_resynthesize(mask: &Array2<f64>, mixture: &Spectrogram) -> Result<AudioClip> {
    if mask.dim() != mixture.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs mixture {:?}",
            mask.dim(),
            mixture.data.dim()
        )));
    }
    if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
    }
    let mut masked = mixture.clone();
    Zip::from(&mut masked.data)
        .and(mask)
        .for_each(|x, &m| *x *= m);
    istft(&masked)
}

/// Zeros placed on each side of a clip by [`pad_edges`].
pub fn edge_padding(config: &StftConfig) -> usize {
    config.window_len - config.hop
}

/// Pads both ends so that every original sample is covered by a full set of
/// overlapping frames. Near an unpadded edge only the window tail covers a
/// sample, and any spectral modification there is amplified on inversion.
pub fn pad_edges(clip: &AudioClip, config: &StftConfig) -> AudioClip {
    let pad = edge_padding(config);
    let mut samples = vec![0.0; clip.len() + 2 * pad];
    samples[pad..pad + clip.len()].copy_from_slice(&clip.samples);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Undoes [`pad_edges`] for a clip of `original_len` samples.
pub fn trim_edges(clip: &AudioClip, original_len: usize, config: &StftConfig) -> Result<AudioClip> {
    let pad = edge_padding(config);
    if clip.len() != original_len + 2 * pad {
        return Err(Error::LengthMismatch(clip.len(), original_len + 2 * pad));
    }
    Ok(AudioClip {
        samples: clip.samples[pad..pad + original_len].to_vec(),
        sample_rate: clip.sample_rate,
    })
}

#[cfg(test)]
mod tests {

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, len: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn frame_count_law() {
        let cfg = StftConfig::default();
        for (n, m) in [(1, 1), (63, 1), (64, 1), (65, 2), (256, 4), (17460, 273)] {
            let s = stft(&AudioClip::zeros(n, 8000), &cfg).unwrap();
            assert_eq!(s.data.dim(), (m, 129), "n = {n}");
        }
    }

    #[test]
    fn constant_clip_bin_zero_is_window_sum() {
        let cfg = StftConfig::default();
        let s = stft(&AudioClip::new(vec![1.0; 2048], 8000).unwrap(), &cfg).unwrap();
        let wsum: f64 = cfg.window().iter().sum();
        // Frames fully inside the signal.
        let full = (2048 - 256) / 64 + 1;
        for t in 0..full {
            assert!((s.data[[t, 0]].norm() - wsum).abs() < 1e-9);
            for f in 2..129 {
                assert!(s.data[[t, f]].norm() < 1e-2 * wsum, "bin {f}: {}", s.data[[t, f]].norm());
            }
        }
    }

    #[test]
    fn round_trip() {
        let cfg = StftConfig::default();
        for (seed, len) in [(1u64, 17460usize), (2, 1), (3, 63), (4, 300)] {
            let c = random_clip(seed, len);
            let back = istft(&stft(&c, &cfg).unwrap()).unwrap();
            assert_eq!(back.len(), len);
            let err = c
                .samples
                .iter()
                .zip(&back.samples)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-6, "len {len}: {err}");
        }
        let zero = stft(&AudioClip::zeros(500, 8000), &cfg).unwrap();
        assert!(istft(&zero).unwrap().samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalized_overlap_add_is_constant() {
        let cfg = StftConfig::default();
        let norm = cfg.synthesis_normalizer(4096);
        let window = cfg.window();
        // Recompute the shifted sum from scratch mid-signal and divide.
        for n in 256..4096 - 256 {
            let direct: f64 = (0..64)
                .filter_map(|j| {
                    let start = j * 64;
                    (n >= start && n - start < 256).then(|| window[n - start].powi(2))
                })
                .sum();
            assert!((direct / norm[n] - 1.0).abs() < 1e-10);
        }
        // The raw squared-window sum itself is nearly flat at 75% overlap.
        let mid = &norm[256..4096 - 256];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!(mid.iter().all(|v| (v / mean - 1.0).abs() < 0.02));
    }

    #[test]
    fn parseval_energy_consistency() {
        let cfg = StftConfig::default();
        let c = random_clip(9, 17460);
        let spec = stft(&c, &cfg).unwrap();
        let mut spectral = 0.0;
        for row in spec.data.rows() {
            for (k, x) in row.iter().enumerate() {
                let weight = if k == 0 || k == 128 { 1.0 } else { 2.0 };
                spectral += weight * x.norm_sqr();
            }
        }
        spectral /= cfg.window_len as f64;
        let norm = cfg.synthesis_normalizer(c.len());
        let mean_norm = norm[256..norm.len() - 256].iter().sum::<f64>() / (norm.len() - 512) as f64;
        let ratio = spectral / (c.energy() * mean_norm);
        assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn log_magnitude_values() {
        let cfg = StftConfig::default();
        let mut spec = stft(&AudioClip::zeros(64, 8000), &cfg).unwrap();
        spec.data[[0, 3]] = Complex64::new(1.0 - LOG_EPSILON, 0.0);
        spec.data[[0, 4]] = Complex64::new(0.0, 2.0);
        let lm = log_magnitude(&spec);
        assert!(lm[[0, 3]].abs() < 1e-9);
        assert!((lm[[0, 0]] - (1e-8f64).ln()).abs() < 1e-12);
        assert!((lm[[0, 0]] + 18.420680743952367).abs() < 1e-9);
        assert!(lm[[0, 4]] > lm[[0, 3]]);
    }

    #[test]
    fn log_magnitude_is_monotone() {
        let cfg = StftConfig::default();
        let spec = stft(&random_clip(4, 2000), &cfg).unwrap();
        let mags = spec.magnitudes();
        let lm = log_magnitude(&spec);
        let flat_m: Vec<f64> = mags.iter().copied().collect();
        let flat_l: Vec<f64> = lm.iter().copied().collect();
        for i in (0..flat_m.len()).step_by(37) {
            for j in (0..flat_m.len()).step_by(41) {
                if flat_m[i] > flat_m[j] {
                    assert!(flat_l[i] > flat_l[j]);
                }
            }
        }
    }

    #[test]
    fn binary_mask_rules() {
        let cfg = StftConfig::default();
        let a = stft(&random_clip(1, 1000), &cfg).unwrap();
        let silent = stft(&AudioClip::zeros(1000, 8000), &cfg).unwrap();
        let m = ideal_binary_mask(&[a.clone(), silent]).unwrap();
        assert!(m.masks[0].iter().all(|v| *v == 1.0));

        let tie = ideal_binary_mask(&[a.clone(), a.clone()]).unwrap();
        assert!(tie.masks[0].iter().all(|v| *v == 1.0));
        assert!(tie.masks[1].iter().all(|v| *v == 0.0));

        let specs: Vec<_> = (0..3).map(|s| stft(&random_clip(s + 10, 1000), &cfg).unwrap()).collect();
        let m = ideal_binary_mask(&specs).unwrap();
        assert_eq!(m.kind, MaskKind::Binary);
        assert_eq!(m.partition_error(), 0.0);

        let short = stft(&random_clip(2, 100), &cfg).unwrap();
        assert!(matches!(ideal_binary_mask(&[a, short]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn resynthesis_with_trivial_masks() {
        let cfg = StftConfig::default();
        let c = random_clip(5, 3000);
        let spec = stft(&c, &cfg).unwrap();
        let ones = Array2::ones(spec.data.dim());
        let back = mask_resynthesize(&ones, &spec).unwrap();
        for (a, b) in c.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1e-6);
        }
        let zeros = Array2::zeros(spec.data.dim());
        assert!(mask_resynthesize(&zeros, &spec).unwrap().samples.iter().all(|v| *v == 0.0));
        assert!(mask_resynthesize(&Array2::zeros((2, 2)), &spec).is_err());
    }

    #[test]
    fn rate_and_config_errors() {
        let cfg = StftConfig::default();
        let c = AudioClip::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(stft(&c, &cfg), Err(Error::RateMismatch { .. })));
        let mut spec = stft(&random_clip(1, 500), &cfg).unwrap();
        spec.original_len = 5000;
        assert!(istft(&spec).is_err());
    }

    #[test]
    fn csv_dump() {
        let cfg = StftConfig::default();
        let spec = stft(&random_clip(1, 64), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        spec.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1 + 129);
        assert!(text.starts_with("frame,bin,re,im\n0,0,"));
    }

    #[test]
    fn padded_masking_stays_bounded_at_the_edges() {
        let config = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let clip = AudioClip::new((0..3000).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap();
        let mask = |spec: &Spectrogram| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            Array2::from_shape_fn(spec.data.dim(), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
        };
        let padded = pad_edges(&clip, &config);
        let spec = stft(&padded, &config).unwrap();
        let out = trim_edges(&mask_resynthesize(&mask(&spec), &spec).unwrap(), clip.len(), &config).unwrap();
        assert_eq!(out.len(), clip.len());
        assert!(out.peak() < 2.0, "{}", out.peak());
        let unpadded = stft(&clip, &config).unwrap();
        let raw = mask_resynthesize(&mask(&unpadded), &unpadded).unwrap();
        assert!(raw.peak() > 10.0 * out.peak());
        let back = trim_edges(&istft(&spec).unwrap(), clip.len(), &config).unwrap();
        let err = back.samples.iter().zip(&clip.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        assert!(trim_edges(&clip, clip.len(), &config).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_holds_for_any_length(len in 1usize..3000, seed in 0u64..1000, gain in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clip = AudioClip::new((0..len).map(|_| gain * rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
            let config = StftConfig::default();
            let spec = stft(&clip, &config).unwrap();
            proptest::prop_assert_eq!(spec.frames(), len.div_ceil(64));
            let back = istft(&spec).unwrap();
            let err = back.samples.iter().zip(&clip.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            proptest::prop_assert!(err <= 1e-9 * gain.max(1.0));
        }

        #[test]
        fn binary_masks_partition_every_bin(len in 64usize..1500, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = StftConfig::default();
            let specs: Vec<Spectrogram> = (0..2)
                .map(|_| {
                    let clip = AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
                    stft(&clip, &config).unwrap()
                })
                .collect();
            let ibm = ideal_binary_mask(&specs).unwrap();
            proptest::prop_assert_eq!(ibm.partition_error(), 0.0);
        }
    }
}
