//! Simulated full-duplex audio device.
//!
//! A clip is played through an acoustic channel (propagation delay,
//! inverse-distance gain, impulse response, additive noise) and captured
//! again. Time advances in buffer-sized cycles. Each cycle the host writes one
//! output segment and reads one input segment; either side may stall. A
//! writer stall leaves the output buffer empty so the device plays silence
//! for that segment (underrun). A reader stall leaves the single-segment input
//! buffer full, so the segment captured during that cycle is dropped
//! (overrun). Dropped spans are zero in the returned recording, which always
//! has the channel-output length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{accumulate, convolve_samples, AudioClip, ImpulseResponse};

pub const SPEED_OF_SOUND_M_S: f64 = 343.0;
pub const MIN_DISTANCE_M: f64 = 0.1;
pub const MIN_BUFFER_FRAMES: usize = 64;
pub const DEFAULT_BUFFER_FRAMES: usize = 256;

/// Mic-to-rig distance of the reference recording geometry.
pub const DEFAULT_MIC_DISTANCE_M: f64 = 2.0;
/// Lateral spacing between the two loudspeakers.
pub const DEFAULT_SOURCE_SPACING_M: f64 = 0.5;

/// Path length from each of two symmetric sources to the microphone.
pub fn source_path_length(mic_distance_m: f64, source_spacing_m: f64) -> f64 {
    mic_distance_m.hypot(source_spacing_m / 2.0)
}

/// One playback path: loudspeaker, room and microphone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub ir: ImpulseResponse,
    pub distance_m: f64,
    pub gain_ref: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl ChannelModel {
    pub fn new(
        ir: ImpulseResponse,
        distance_m: f64,
        gain_ref: f64,
        noise_std: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        let channel = Self {
            ir,
            distance_m,
            gain_ref,
            noise_std,
            noise_seed,
        };
        channel.validate()?;
        Ok(channel)
    }

    /// Unit impulse response, unit gain at 1 m, no noise.
    pub fn transparent(distance_m: f64, sample_rate: u32) -> Self {
        Self {
            ir: ImpulseResponse::identity(sample_rate),
            distance_m,
            gain_ref: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m >= MIN_DISTANCE_M) {
            return Err(Error::InvalidArgument(format!(
                "channel distance {} m below {MIN_DISTANCE_M} m",
                self.distance_m
            )));
        }
        if !(self.noise_std >= 0.0) || !self.gain_ref.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be >= 0 and gain finite".into()));
        }
        Ok(())
    }

    pub fn delay_samples(&self) -> usize {
        (self.distance_m / SPEED_OF_SOUND_M_S * self.ir.sample_rate as f64).round() as usize
    }

    pub fn gain(&self) -> f64 {
        self.gain_ref / self.distance_m
    }

    /// Length of the channel output for an input of `n` samples.
    pub fn output_len(&self, n: usize) -> usize {
        self.delay_samples() + n + self.ir.len() - 1
    }
}

/// Delay, gain, impulse response, then seeded white Gaussian noise.
pub fn apply_channel(clip: &AudioClip, channel: &ChannelModel) -> Result<AudioClip> {
    clip.check_rate(channel.ir.sample_rate)?;
    channel.validate()?;
    let delay = channel.delay_samples();
    let gain = channel.gain();
    let mut samples = vec![0.0; delay];
    samples.extend(
        convolve_samples(&clip.samples, &channel.ir.taps)
            .into_iter()
            .map(|x| x * gain),
    );
    if channel.noise_std > 0.0 {
        let normal = Normal::new(0.0, channel.noise_std)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(channel.noise_seed);
        samples.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    }
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterMode {
    Reader,
    Writer,
    Both,
    Off,
}

/// Host-side scheduling hiccups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterModel {
    pub stall_probability: f64,
    pub stall_cycles: usize,
    pub mode: JitterMode,
}

impl Default for JitterModel {
    fn default() -> Self {
        Self::off()
    }
}

impl JitterModel {
    pub fn off() -> Self {
        Self {
            stall_probability: 0.0,
            stall_cycles: 1,
            mode: JitterMode::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.stall_probability) {
            return Err(Error::InvalidArgument(format!(
                "stall probability {} outside [0, 1]",
                self.stall_probability
            )));
        }
        if self.stall_cycles == 0 {
            return Err(Error::InvalidArgument("stall_cycles must be positive".into()));
        }
        Ok(())
    }

    fn reader_active(&self) -> bool {
        matches!(self.mode, JitterMode::Reader | JitterMode::Both)
    }

    fn writer_active(&self) -> bool {
        matches!(self.mode, JitterMode::Writer | JitterMode::Both)
    }

    /// Per-cycle stall flags for the host reader and writer.
    ///
    /// While no stall is in progress, each cycle starts a new stall of
    /// `stall_cycles` cycles with probability `stall_probability`. The reader
    /// and writer draw from independent streams of the device seed.
    pub fn schedule(&self, seed: u64, read_cycles: usize, write_cycles: usize) -> StallSchedule {
        let draw = |active: bool, stream: u64, cycles: usize| -> Vec<bool> {
            if !active || self.stall_probability == 0.0 {
                return vec![false; cycles];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut flags = Vec::with_capacity(cycles);
            let mut remaining = 0usize;
            for _ in 0..cycles {
                if remaining == 0 && rng.random_bool(self.stall_probability) {
                    remaining = self.stall_cycles;
                }
                flags.push(remaining > 0);
                remaining = remaining.saturating_sub(1);
            }
            flags
        };
        StallSchedule {
            reader: draw(self.reader_active(), 1, read_cycles),
            writer: draw(self.writer_active(), 2, write_cycles),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StallSchedule {
    pub reader: Vec<bool>,
    pub writer: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub sample_rate: u32,
    pub buffer_frames: usize,
    #[serde(default)]
    pub jitter: JitterModel,
    pub seed: u64,
}

impl DeviceConfig {
    pub fn new(sample_rate: u32, buffer_frames: usize, jitter: JitterModel, seed: u64) -> Result<Self> {
        let device = Self {
            sample_rate,
            buffer_frames,
            jitter,
            seed,
        };
        device.validate()?;
        Ok(device)
    }

    /// 8 kHz, 256-frame buffers, no jitter.
    pub fn ideal(seed: u64) -> Self {
        Self {
            sample_rate: 8000,
            buffer_frames: DEFAULT_BUFFER_FRAMES,
            jitter: JitterModel::off(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_frames < MIN_BUFFER_FRAMES {
            return Err(Error::InvalidArgument(format!(
                "buffer_frames {} below {MIN_BUFFER_FRAMES}",
                self.buffer_frames
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("device sample rate must be positive".into()));
        }
        self.jitter.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Captured samples plus the device's glitch counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub clip: AudioClip,
    pub overrun_lost: usize,
    pub underrun_inserted: usize,
}

impl Recording {
    pub fn is_clean(&self) -> bool {
        self.overrun_lost == 0 && self.underrun_inserted == 0
    }
}

/// Zeroes the output segments the host failed to write. Returns the number of
/// content samples replaced by silence.
fn apply_underruns(played: &mut [Vec<f64>], stalls: &[bool], frames: usize) -> usize {
    let len = played.iter().map(Vec::len).max().unwrap_or(0);
    let mut inserted = 0;
    for (cycle, _) in stalls.iter().enumerate().filter(|(_, s)| **s) {
        let start = cycle * frames;
        let end = ((cycle + 1) * frames).min(len);
        for channel in played.iter_mut() {
            channel[start..end].iter_mut().for_each(|x| *x = 0.0);
        }
        inserted += end - start;
    }
    inserted
}

/// Drops every input segment captured during a reader stall, except in the
/// first cycle where the input buffer is still empty.
fn apply_overruns(captured: &mut [f64], stalls: &[bool], frames: usize) -> usize {
    let mut lost = 0;
    for (cycle, _) in stalls.iter().enumerate().skip(1).filter(|(_, s)| **s) {
        let start = cycle * frames;
        let end = ((cycle + 1) * frames).min(captured.len());
        captured[start..end].iter_mut().for_each(|x| *x = 0.0);
        lost += end - start;
    }
    lost
}

fn run_device(
    sources: &[&AudioClip],
    channels: &[&ChannelModel],
    device: &DeviceConfig,
) -> Result<Recording> {
    device.validate()?;
    for (clip, channel) in sources.iter().zip(channels) {
        clip.check_rate(device.sample_rate)?;
        channel.ir.sample_rate_matches(device.sample_rate)?;
    }
    let n = sources.iter().map(|c| c.len()).max().unwrap_or(0);
    let out_len = channels.iter().map(|c| c.output_len(n)).max().unwrap_or(0);
    let frames = device.buffer_frames;
    let schedule = device
        .jitter
        .schedule(device.seed, out_len.div_ceil(frames), n.div_ceil(frames));

    let mut played: Vec<Vec<f64>> = sources.iter().map(|c| c.fit_to(n).samples).collect();
    let underrun_inserted = apply_underruns(&mut played, &schedule.writer, frames);

    let mut captured = vec![0.0; out_len];
    for (samples, channel) in played.into_iter().zip(channels) {
        let out = apply_channel(
            &AudioClip {
                samples,
                sample_rate: device.sample_rate,
            },
            channel,
        )?;
        accumulate(&mut captured, &out.samples);
    }
    let overrun_lost = apply_overruns(&mut captured, &schedule.reader, frames);
    Ok(Recording {
        clip: AudioClip {
            samples: captured,
            sample_rate: device.sample_rate,
        },
        overrun_lost,
        underrun_inserted,
    })
}

impl ImpulseResponse {
    fn sample_rate_matches(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::RateMismatch {
                left: self.sample_rate,
                right: rate,
            });
        }
        Ok(())
    }
}

/// Plays one clip on a single output channel while recording the microphone.
pub fn play_record_mono(
    clip: &AudioClip,
    channel: &ChannelModel,
    device: &DeviceConfig,
) -> Result<Recording> {
    run_device(&[clip], &[channel], device)
}

/// Plays two clips sample-synchronously on the left and right outputs while
/// recording their acoustic sum.
pub fn play_record_stereo(
    left: &AudioClip,
    right: &AudioClip,
    ch_left: &ChannelModel,
    ch_right: &ChannelModel,
    device: &DeviceConfig,
) -> Result<Recording> {
    left.check_rate(right.sample_rate)?;
    run_device(&[left, right], &[ch_left, ch_right], device)
}

/// Parametric room used to derive impulse responses from geometry.
///
/// The impulse response starts with the unit direct path (the propagation
/// delay is applied by the channel). Early reflections and an exponentially
/// decaying noise tail follow. Their combined energy relative to the direct
/// path is `reverb_ratio_at_1m * distance²`, so the direct-to-reverberant
/// ratio falls as the microphone moves away.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomAcoustics {
    pub rt60_s: f64,
    pub reverb_ratio_at_1m: f64,
    pub early_reflections: usize,
    /// Fraction of the reverberant energy carried by the early reflections.
    pub early_share: f64,
}

impl Default for RoomAcoustics {
    fn default() -> Self {
        Self {
            rt60_s: 0.25,
            reverb_ratio_at_1m: 0.1,
            early_reflections: 6,
            early_share: 0.3,
        }
    }
}

impl RoomAcoustics {
    pub fn impulse_response(&self, distance_m: f64, sample_rate: u32, seed: u64) -> Result<ImpulseResponse> {
        if !(self.rt60_s > 0.0) || !(self.reverb_ratio_at_1m >= 0.0) || !(0.0..=1.0).contains(&self.early_share) {
            return Err(Error::InvalidArgument("invalid room acoustics".into()));
        }
        let rate = sample_rate as f64;
        let len = ((self.rt60_s * rate).round() as usize).max(2);
        let mut taps = vec![0.0; len];
        taps[0] = 1.0;
        let reverb_energy = self.reverb_ratio_at_1m * distance_m * distance_m;
        if reverb_energy == 0.0 {
            return ImpulseResponse::new(taps, sample_rate);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut early = vec![0.0; len];
        let early_max = ((0.015 * rate) as usize).clamp(2, len - 1);
        let early_min = ((0.001 * rate) as usize).clamp(1, early_max);
        for _ in 0..self.early_reflections {
            let at = rng.random_range(early_min..=early_max);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            early[at] += sign * rng.random_range(0.5..1.0);
        }

        let decay = 6.907755 / (self.rt60_s * rate);
        let tail_start = ((0.002 * rate) as usize).clamp(1, len - 1);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut tail = vec![0.0; len];
        for (i, t) in tail.iter_mut().enumerate().skip(tail_start) {
            *t = normal.sample(&mut rng) * (-decay * i as f64).exp();
        }

        let scale_to = |v: &mut [f64], target: f64| {
            let e: f64 = v.iter().map(|x| x * x).sum();
            if e > 0.0 {
                let g = (target / e).sqrt();
                v.iter_mut().for_each(|x| *x *= g);
            }
        };
        let early_target = if self.early_reflections > 0 { self.early_share } else { 0.0 };
        scale_to(&mut early, reverb_energy * early_target);
        scale_to(&mut tail, reverb_energy * (1.0 - early_target));
        for i in 0..len {
            taps[i] += early[i] + tail[i];
        }
        ImpulseResponse::new(taps, sample_rate)
    }
}
