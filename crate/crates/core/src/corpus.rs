//! Corpus forge: toy utterances, file naming, mixture planning, capture with
//! retry, synthetic twins and the manifest.
//!
//! Layout under the corpus root:
//!
//! ```text
//! Source/<dialect>_<gender>-<speaker>_<sentence>.wav   (toy catalogs only)
//! GTS/<mixid>_s1.wav, GTS/<mixid>_s2.wav
//! RealMix/<mixid>.wav
//! SynthMix/<mixid>.wav
//! manifest.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::duplex::{
    play_record_mono, play_record_stereo, source_path_length, ChannelModel, DeviceConfig,
    Recording, RoomAcoustics, DEFAULT_MIC_DISTANCE_M, DEFAULT_SOURCE_SPACING_M,
};
use crate::error::{Error, Result};
use crate::signal::{load_wav_mono, mix_pointwise, resample_to_8k, save_wav, AudioClip, ImpulseResponse, PIPELINE_RATE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Toy utterances

/// Source-filter description of a toy speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub formants: Vec<f64>,
    pub bandwidths: Vec<f64>,
}

impl SpeakerProfile {
    fn validate(&self) -> Result<()> {
        if !(70.0..=300.0).contains(&self.f0) {
            return Err(Error::InvalidArgument(format!("f0 {} Hz outside [70, 300]", self.f0)));
        }
        if self.formants.is_empty() || self.formants.len() != self.bandwidths.len() {
            return Err(Error::InvalidArgument("need one bandwidth per formant".into()));
        }
        let nyquist = PIPELINE_RATE as f64 / 2.0;
        if self.formants.iter().any(|f| !(*f > 0.0 && *f < nyquist))
            || self.bandwidths.iter().any(|b| !(*b > 0.0))
        {
            return Err(Error::InvalidArgument("formants must lie in (0, 4000) Hz".into()));
        }
        Ok(())
    }
}

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self {
            a1: 0.0,
            a2: 0.0,
            gain: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, freq: f64, bandwidth: f64, rate: f64) {
        let r = (-PI * bandwidth / rate).exp();
        let theta = 2.0 * PI * freq / rate;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = -r * r;
        // |H(e^{jθ})| of 1 / (1 - a1 z^-1 - a2 z^-2).
        let (c, s) = (theta.cos(), theta.sin());
        let (c2, s2) = ((2.0 * theta).cos(), (2.0 * theta).sin());
        let re = 1.0 - self.a1 * c - self.a2 * c2;
        let im = self.a1 * s + self.a2 * s2;
        self.gain = (re * re + im * im).sqrt();
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes a deterministic speech-like clip at 8 kHz.
///
/// A jittered glottal pulse train at `f0` drives a cascade of formant
/// resonators; formants and pitch wander per syllable and a seeded
/// syllable-rate envelope (with short pauses) shapes the amplitude.
pub fn generate_toy_utterance(profile: &SpeakerProfile, duration_s: f64, seed: u64) -> Result<AudioClip> {
    if !(0.5..=5.0).contains(&duration_s) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} s outside [0.5, 5]")));
    }
    profile.validate()?;
    let rate = PIPELINE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Syllable plan: (start, length, is_pause, pitch factor, formant factors, level).
    struct Syllable {
        start: usize,
        len: usize,
        voiced: bool,
        pitch: f64,
        formant_scale: Vec<f64>,
        level: f64,
    }
    let mut syllables = Vec::new();
    let mut pos = 0usize;
    while pos < n {
        let voiced = syllables.is_empty() || rng.random_bool(0.8);
        let len_s = if voiced {
            rng.random_range(0.12..0.30)
        } else {
            rng.random_range(0.03..0.09)
        };
        let len = ((len_s * rate) as usize).min(n - pos).max(1);
        syllables.push(Syllable {
            start: pos,
            len,
            voiced,
            pitch: rng.random_range(0.92..1.08),
            formant_scale: profile
                .formants
                .iter()
                .map(|_| rng.random_range(0.85..1.15))
                .collect(),
            level: rng.random_range(0.5..1.0),
        });
        pos += len;
    }

    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let mut resonators: Vec<Resonator> = profile.formants.iter().map(|_| Resonator::new()).collect();
    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0;
    let mut period_jitter = 1.0;
    for syl in &syllables {
        for (res, (f, (bw, scale))) in resonators.iter_mut().zip(
            profile
                .formants
                .iter()
                .zip(profile.bandwidths.iter().zip(&syl.formant_scale)),
        ) {
            res.tune((f * scale).min(rate / 2.0 - 100.0), *bw, rate);
        }
        for i in 0..syl.len {
            let t = (syl.start + i) as f64 / rate;
            let env = if syl.voiced {
                let x = (i as f64 + 0.5) / syl.len as f64;
                syl.level * (PI * x).sin().powf(0.6)
            } else {
                0.0
            };
            let f0 = profile.f0 * syl.pitch * (1.0 + 0.04 * (2.0 * PI * 0.7 * t + vibrato_phase).sin());
            phase += f0 * period_jitter / rate;
            let mut excitation = 0.0;
            if phase >= 1.0 {
                phase -= 1.0;
                excitation = 1.0;
                period_jitter = 1.0 + rng.random_range(-0.01..0.01);
            }
            let breath = 0.02 * rng.random_range(-1.0..1.0);
            let mut y = env * (excitation + breath);
            for res in resonators.iter_mut() {
                y = res.step(y);
            }
            samples.push(y);
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    AudioClip::new(samples, PIPELINE_RATE)
}

// ---------------------------------------------------------------------------
// Utterance names

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub speaker_id: String,
    pub gender: Gender,
    pub dialect: String,
    pub sentence_id: String,
    pub path: String,
    pub length_samples: usize,
}

impl UtteranceMeta {
    /// `<dialect>_<gender>-<speaker>_<sentence>.wav`
    pub fn file_name(&self) -> String {
        format_utterance_name(&self.dialect, self.gender, &self.speaker_id, &self.sentence_id)
    }
}

pub fn format_utterance_name(dialect: &str, gender: Gender, speaker: &str, sentence: &str) -> String {
    format!("{dialect}_{gender}-{speaker}_{sentence}.wav")
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric())
}

/// Parses a catalog file name; `path` is set to the name and the length is
/// left at 0 until the file is loaded.
pub fn parse_utterance_name(filename: &str) -> Result<UtteranceMeta> {
    let malformed = || Error::MalformedName(filename.to_string());
    let stem = filename.strip_suffix(".wav").ok_or_else(malformed)?;
    let parts: Vec<&str> = stem.split('_').collect();
    let [dialect, who, sentence] = parts[..] else {
        return Err(malformed());
    };
    let (gender, speaker) = who.split_once('-').ok_or_else(malformed)?;
    let gender = match gender {
        "M" => Gender::M,
        "F" => Gender::F,
        _ => return Err(malformed()),
    };
    if !is_token(dialect) || !is_token(speaker) || !is_token(sentence) {
        return Err(malformed());
    }
    Ok(UtteranceMeta {
        speaker_id: speaker.to_string(),
        gender,
        dialect: dialect.to_string(),
        sentence_id: sentence.to_string(),
        path: filename.to_string(),
        length_samples: 0,
    })
}

// ---------------------------------------------------------------------------
// Planning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConstraints {
    pub length_ratio_min: f64,
    pub max_uses_per_speaker: Option<usize>,
    pub max_uses_per_sentence: Option<usize>,
}

impl Default for PlanConstraints {
    fn default() -> Self {
        Self {
            length_ratio_min: 0.8,
            max_uses_per_speaker: None,
            max_uses_per_sentence: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub a: UtteranceMeta,
    pub b: UtteranceMeta,
    pub gain_a: f64,
    pub gain_b: f64,
}

impl MixturePlan {
    pub fn length_ratio(&self) -> f64 {
        length_ratio(self.a.length_samples, self.b.length_samples)
    }
}

fn length_ratio(a: usize, b: usize) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi == 0 {
        1.0
    } else {
        lo as f64 / hi as f64
    }
}

/// Picks `count` utterance pairs satisfying the selection criteria: distinct
/// speakers, no repeated pair, bounded speaker and sentence reuse, and
/// comparable lengths. Each step takes the candidate whose speakers and
/// sentences are least used so far, breaking ties with the seeded RNG.
pub fn plan_mixtures(
    catalog: &[UtteranceMeta],
    count: usize,
    seed: u64,
    constraints: &PlanConstraints,
) -> Result<Vec<MixturePlan>> {
    let speakers: HashSet<&str> = catalog.iter().map(|u| u.speaker_id.as_str()).collect();
    if speakers.len() < 2 {
        return Err(Error::Infeasible {
            constraint: "distinct speakers".into(),
            planned: 0,
            requested: count,
        });
    }
    let mut seen = HashSet::new();
    for u in catalog {
        if !seen.insert((&u.speaker_id, &u.sentence_id)) {
            return Err(Error::InvalidArgument(format!(
                "duplicate utterance {}/{} in catalog",
                u.speaker_id, u.sentence_id
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speaker_uses: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sentence_uses: BTreeMap<&str, usize> = BTreeMap::new();
    let mut used_pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut plans = Vec::with_capacity(count);

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..catalog.len() {
        for j in i + 1..catalog.len() {
            if catalog[i].speaker_id != catalog[j].speaker_id {
                pairs.push((i, j));
            }
        }
    }

    while plans.len() < count {
        let infeasible = |constraint: &str| Error::Infeasible {
            constraint: constraint.to_string(),
            planned: plans.len(),
            requested: count,
        };
        let mut candidates: Vec<(usize, usize)> =
            pairs.iter().copied().filter(|p| !used_pairs.contains(p)).collect();
        if candidates.is_empty() {
            return Err(infeasible("distinct pairs"));
        }
        candidates.retain(|&(i, j)| {
            length_ratio(catalog[i].length_samples, catalog[j].length_samples) >= constraints.length_ratio_min
        });
        if candidates.is_empty() {
            return Err(infeasible("length_ratio_min"));
        }
        let uses = |m: &BTreeMap<&str, usize>, k: &str| m.get(k).copied().unwrap_or(0);
        if let Some(max) = constraints.max_uses_per_speaker {
            candidates.retain(|&(i, j)| {
                uses(&speaker_uses, &catalog[i].speaker_id) < max
                    && uses(&speaker_uses, &catalog[j].speaker_id) < max
            });
            if candidates.is_empty() {
                return Err(infeasible("max_uses_per_speaker"));
            }
        }
        if let Some(max) = constraints.max_uses_per_sentence {
            candidates.retain(|&(i, j)| {
                let (si, sj) = (&catalog[i].sentence_id, &catalog[j].sentence_id);
                let extra = if si == sj { 2 } else { 1 };
                uses(&sentence_uses, si) + extra <= max && uses(&sentence_uses, sj) + extra <= max
            });
            if candidates.is_empty() {
                return Err(infeasible("max_uses_per_sentence"));
            }
        }
        candidates.shuffle(&mut rng);
        let key = |&(i, j): &(usize, usize)| {
            let (a, b) = (&catalog[i], &catalog[j]);
            let (ua, ub) = (uses(&speaker_uses, &a.speaker_id), uses(&speaker_uses, &b.speaker_id));
            let (sa, sb) = (uses(&sentence_uses, &a.sentence_id), uses(&sentence_uses, &b.sentence_id));
            (ua.max(ub), ua + ub, sa.max(sb), sa + sb)
        };
        let &(i, j) = candidates.iter().min_by_key(|p| key(p)).expect("non-empty");
        used_pairs.insert((i, j));
        for u in [&catalog[i], &catalog[j]] {
            *speaker_uses.entry(&u.speaker_id).or_default() += 1;
            *sentence_uses.entry(&u.sentence_id).or_default() += 1;
        }
        // Random speaker order within the pair.
        let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
        plans.push(MixturePlan {
            a: catalog[a].clone(),
            b: catalog[b].clone(),
            gain_a: 1.0,
            gain_b: 1.0,
        });
    }
    Ok(plans)
}

/// Re-checks every selection criterion on a finished plan list.
pub fn check_plans(plans: &[MixturePlan], constraints: &PlanConstraints) -> Result<()> {
    let mut speaker_uses: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sentence_uses: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pairs = HashSet::new();
    for p in plans {
        if p.a.speaker_id == p.b.speaker_id {
            return Err(Error::InvalidArgument(format!("same speaker {} twice", p.a.speaker_id)));
        }
        if p.length_ratio() < constraints.length_ratio_min {
            return Err(Error::InvalidArgument("length ratio below minimum".into()));
        }
        let mut key = [(&p.a.speaker_id, &p.a.sentence_id), (&p.b.speaker_id, &p.b.sentence_id)];
        key.sort();
        if !pairs.insert(key) {
            return Err(Error::InvalidArgument("repeated utterance pair".into()));
        }
        for u in [&p.a, &p.b] {
            *speaker_uses.entry(&u.speaker_id).or_default() += 1;
            *sentence_uses.entry(&u.sentence_id).or_default() += 1;
        }
    }
    if let Some(max) = constraints.max_uses_per_speaker {
        if speaker_uses.values().any(|&n| n > max) {
            return Err(Error::InvalidArgument("speaker used too often".into()));
        }
    }
    if let Some(max) = constraints.max_uses_per_sentence {
        if sentence_uses.values().any(|&n| n > max) {
            return Err(Error::InvalidArgument("sentence used too often".into()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Recording rig

/// Geometry and acoustics of the two-loudspeaker rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub mic_distance_m: f64,
    pub source_spacing_m: f64,
    pub gain_ref: f64,
    pub noise_std: f64,
    /// `None` gives an anechoic path (unit impulse response).
    pub room: Option<RoomAcoustics>,
    pub seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            mic_distance_m: DEFAULT_MIC_DISTANCE_M,
            source_spacing_m: DEFAULT_SOURCE_SPACING_M,
            gain_ref: 1.0,
            noise_std: 0.0,
            room: Some(RoomAcoustics::default()),
            seed: 0,
        }
    }
}

impl RigConfig {
    /// Left and right channel models at the configured microphone distance.
    pub fn channels(&self) -> Result<(ChannelModel, ChannelModel)> {
        self.channels_at(self.mic_distance_m)
    }

    /// Channel models with the microphone moved to `mic_distance_m`.
    pub fn channels_at(&self, mic_distance_m: f64) -> Result<(ChannelModel, ChannelModel)> {
        let distance = source_path_length(mic_distance_m, self.source_spacing_m);
        let make = |side: u64| -> Result<ChannelModel> {
            let ir = match &self.room {
                Some(room) => room.impulse_response(distance, PIPELINE_RATE, self.seed.wrapping_mul(2).wrapping_add(side))?,
                None => ImpulseResponse::identity(PIPELINE_RATE),
            };
            ChannelModel::new(ir, distance, self.gain_ref, self.noise_std, mix_seed(self.seed, 0x6e6f, side))
        };
        Ok((make(0)?, make(1)?))
    }
}

/// SplitMix64-style combination of a base seed with two tags.
pub fn mix_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureAttempts {
    pub gts1: u32,
    pub gts2: u32,
    pub realmix: u32,
}

impl CaptureAttempts {
    pub fn retries(&self) -> u32 {
        self.gts1 + self.gts2 + self.realmix - 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedPair {
    pub gts1: AudioClip,
    pub gts2: AudioClip,
    pub realmix: AudioClip,
    pub attempts: CaptureAttempts,
}

fn capture_until_clean(
    name: &str,
    tag: u64,
    device: &DeviceConfig,
    max_retries: u32,
    mut run: impl FnMut(&DeviceConfig) -> Result<Recording>,
) -> Result<(AudioClip, u32)> {
    for attempt in 0..=max_retries {
        let dev = device.with_seed(mix_seed(device.seed, tag, attempt as u64));
        let rec = run(&dev)?;
        if rec.is_clean() {
            return Ok((rec.clip, attempt + 1));
        }
        log::info!(
            "capture {name}: attempt {} glitched (overrun {}, underrun {}), retrying",
            attempt + 1,
            rec.overrun_lost,
            rec.underrun_inserted
        );
    }
    Err(Error::RetryExhausted {
        capture: name.to_string(),
        attempts: max_retries + 1,
    })
}

/// Captures speaker 1 alone, speaker 2 alone, then both together, repeating
/// each capture until the device reports no overrun and no underrun.
pub fn record_pair(
    a: &AudioClip,
    b: &AudioClip,
    gains: (f64, f64),
    ch_a: &ChannelModel,
    ch_b: &ChannelModel,
    device: &DeviceConfig,
    max_retries: u32,
) -> Result<RecordedPair> {
    let n = a.len().max(b.len());
    let a = a.fit_to(n).scaled(gains.0);
    let b = b.fit_to(n).scaled(gains.1);
    let (gts1, t1) = capture_until_clean("gts1", 1, device, max_retries, |d| play_record_mono(&a, ch_a, d))?;
    let (gts2, t2) = capture_until_clean("gts2", 2, device, max_retries, |d| play_record_mono(&b, ch_b, d))?;
    let (realmix, t3) = capture_until_clean("realmix", 3, device, max_retries, |d| {
        play_record_stereo(&a, &b, ch_a, ch_b, d)
    })?;
    Ok(RecordedPair {
        gts1,
        gts2,
        realmix,
        attempts: CaptureAttempts {
            gts1: t1,
            gts2: t2,
            realmix: t3,
        },
    })
}

/// Loads both utterances of a plan from `source_root` at 8 kHz.
pub fn load_plan_sources(plan: &MixturePlan, source_root: &Path) -> Result<(AudioClip, AudioClip)> {
    let a = resample_to_8k(&load_wav_mono(source_root.join(&plan.a.path))?)?;
    let b = resample_to_8k(&load_wav_mono(source_root.join(&plan.b.path))?)?;
    Ok((a, b))
}

/// Gain-weighted pointwise sum of the two raw utterances.
pub fn synthetic_twin(a: &AudioClip, b: &AudioClip, gains: (f64, f64)) -> Result<AudioClip> {
    mix_pointwise(&[a.clone(), b.clone()], &[gains.0, gains.1])
}

pub fn build_synthetic_twin(plan: &MixturePlan, source_root: &Path) -> Result<AudioClip> {
    let (a, b) = load_plan_sources(plan, source_root)?;
    synthetic_twin(&a, &b, (plan.gain_a, plan.gain_b))
}

// ---------------------------------------------------------------------------
// Catalogs

/// Generated stand-in catalog of toy speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCatalog {
    pub speakers: usize,
    pub sentences_per_speaker: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub seed: u64,
}

impl Default for ToyCatalog {
    fn default() -> Self {
        Self {
            speakers: 8,
            sentences_per_speaker: 6,
            min_duration_s: 1.0,
            max_duration_s: 1.25,
            seed: 1,
        }
    }
}

impl ToyCatalog {
    /// Deterministic profile of speaker `index`: even indices are female.
    pub fn profile(&self, index: usize) -> (Gender, SpeakerProfile) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0x7370, index as u64));
        let gender = if index.is_multiple_of(2) { Gender::F } else { Gender::M };
        let (f0, tract) = match gender {
            Gender::F => (rng.random_range(175.0..250.0), rng.random_range(1.12..1.22)),
            Gender::M => (rng.random_range(90.0..140.0), rng.random_range(0.92..1.02)),
        };
        let base = [520.0, 1450.0, 2500.0];
        let formants = base
            .iter()
            .map(|f| f * tract * rng.random_range(0.9..1.1))
            .collect();
        (
            gender,
            SpeakerProfile {
                f0,
                formants,
                bandwidths: vec![90.0, 110.0, 160.0],
            },
        )
    }

    /// Writes the catalog WAV files into `dir` and returns their metadata.
    pub fn generate(&self, dir: &Path) -> Result<Vec<UtteranceMeta>> {
        if !(self.min_duration_s <= self.max_duration_s) {
            return Err(Error::InvalidArgument("min_duration_s > max_duration_s".into()));
        }
        std::fs::create_dir_all(dir)?;
        let mut catalog = Vec::new();
        for s in 0..self.speakers {
            let (gender, profile) = self.profile(s);
            let speaker = format!("S{:02}", s + 1);
            let dialect = format!("DR{}", s % 8 + 1);
            for k in 0..self.sentences_per_speaker {
                let seed = mix_seed(self.seed, s as u64, k as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let duration = if self.max_duration_s > self.min_duration_s {
                    rng.random_range(self.min_duration_s..self.max_duration_s)
                } else {
                    self.min_duration_s
                };
                let clip = generate_toy_utterance(&profile, duration, seed)?;
                let sentence = format!("SX{}", k + 1);
                let name = format_utterance_name(&dialect, gender, &speaker, &sentence);
                save_wav(&clip, dir.join(&name))?;
                catalog.push(UtteranceMeta {
                    speaker_id: speaker.clone(),
                    gender,
                    dialect: dialect.clone(),
                    sentence_id: sentence,
                    path: name,
                    length_samples: clip.len(),
                });
            }
        }
        Ok(catalog)
    }
}

/// Reads every conformant `*.wav` in `dir` (sorted by name); lengths are
/// measured after resampling to 8 kHz.
pub fn scan_wav_catalog(dir: &Path) -> Result<Vec<UtteranceMeta>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    let mut catalog = Vec::with_capacity(names.len());
    for name in names {
        let mut meta = parse_utterance_name(&name)?;
        meta.length_samples = resample_to_8k(&load_wav_mono(dir.join(&name))?)?.len();
        catalog.push(meta);
    }
    Ok(catalog)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogSource {
    Toy(ToyCatalog),
    WavDir(PathBuf),
}

impl Default for CatalogSource {
    fn default() -> Self {
        CatalogSource::Toy(ToyCatalog::default())
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Which mixture flavour a model is trained or tested on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureKind {
    Synthetic,
    Realistic,
}

impl fmt::Display for MixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixtureKind::Synthetic => "synthetic",
            MixtureKind::Realistic => "realistic",
        })
    }
}

impl FromStr for MixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(MixtureKind::Synthetic),
            "realistic" => Ok(MixtureKind::Realistic),
            other => Err(Error::InvalidArgument(format!("unknown mixture kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub mix_id: String,
    pub split: Split,
    pub plan: MixturePlan,
    pub gts1_path: String,
    pub gts2_path: String,
    pub realmix_path: String,
    pub synthmix_path: String,
    pub overruns_retried: u32,
    pub attempts: CaptureAttempts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub split_ratio: [u32; 3],
    /// Directory holding the planned utterances, relative to the corpus root.
    pub source_dir: String,
    pub entries: Vec<ManifestEntry>,
}

/// A loaded mixture with its two reference sources.
#[derive(Clone, Debug)]
pub struct LoadedExample {
    pub mix_id: String,
    pub mixture: AudioClip,
    pub sources: [AudioClip; 2],
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads the mixture and references of one entry. Synthetic examples use
    /// the raw planned utterances as references; realistic ones use the
    /// captured ground truths.
    pub fn load_example(&self, root: &Path, entry: &ManifestEntry, kind: MixtureKind) -> Result<LoadedExample> {
        let (mixture, sources) = match kind {
            MixtureKind::Synthetic => {
                let (a, b) = load_plan_sources(&entry.plan, &root.join(&self.source_dir))?;
                let mixture = load_wav_mono(root.join(&entry.synthmix_path))?;
                let n = mixture.len();
                (
                    mixture,
                    [a.scaled(entry.plan.gain_a).fit_to(n), b.scaled(entry.plan.gain_b).fit_to(n)],
                )
            }
            MixtureKind::Realistic => {
                let mixture = load_wav_mono(root.join(&entry.realmix_path))?;
                let n = mixture.len();
                let g1 = load_wav_mono(root.join(&entry.gts1_path))?.fit_to(n);
                let g2 = load_wav_mono(root.join(&entry.gts2_path))?.fit_to(n);
                (mixture, [g1, g2])
            }
        };
        Ok(LoadedExample {
            mix_id: entry.mix_id.clone(),
            mixture,
            sources,
        })
    }
}

/// Split sizes by largest remainder; ties favour the earlier split.
pub fn split_sizes(count: usize, ratio: [u32; 3]) -> Result<[usize; 3]> {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratio sums to zero".into()));
    }
    let mut sizes = [0usize; 3];
    let mut remainders = [(0u64, 0usize); 3];
    for i in 0..3 {
        let exact = count as u64 * ratio[i] as u64;
        sizes[i] = (exact / total) as usize;
        remainders[i] = (exact % total, i);
    }
    let mut left = count - sizes.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub source: CatalogSource,
    pub mixtures: usize,
    pub split_ratio: [u32; 3],
    pub seed: u64,
    pub constraints: PlanConstraints,
    pub max_retries: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            source: CatalogSource::default(),
            mixtures: 12,
            split_ratio: [6, 2, 1],
            seed: 7,
            constraints: PlanConstraints::default(),
            max_retries: 20,
        }
    }
}

/// Hex SHA-256 over the canonical JSON of everything that shapes the corpus.
pub fn config_hash(corpus: &CorpusConfig, rig: &RigConfig, device: &DeviceConfig) -> Result<String> {
    let canonical = serde_json::to_vec(&(corpus, rig, device))?;
    let digest = Sha256::digest(&canonical);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Device used to capture mixture `index`; each mixture gets its own jitter
/// stream.
pub fn capture_device(device: &DeviceConfig, index: usize) -> DeviceConfig {
    device.with_seed(mix_seed(device.seed, 0x6d6978, index as u64))
}

/// Plans, records and stores a full corpus under `root`; writes and returns
/// the manifest.
pub fn build_corpus(corpus: &CorpusConfig, rig: &RigConfig, device: &DeviceConfig, root: &Path) -> Result<Manifest> {
    device.validate()?;
    if device.sample_rate != PIPELINE_RATE {
        return Err(Error::RateMismatch {
            left: device.sample_rate,
            right: PIPELINE_RATE,
        });
    }
    for dir in ["GTS", "RealMix", "SynthMix"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let (catalog, source_dir) = match &corpus.source {
        CatalogSource::Toy(toy) => (toy.generate(&root.join("Source"))?, "Source".to_string()),
        CatalogSource::WavDir(dir) => {
            let dir = if dir.is_absolute() { dir.clone() } else { std::env::current_dir()?.join(dir) };
            (scan_wav_catalog(&dir)?, dir.to_string_lossy().into_owned())
        }
    };
    let plans = plan_mixtures(&catalog, corpus.mixtures, corpus.seed, &corpus.constraints)?;
    let sizes = split_sizes(plans.len(), corpus.split_ratio)?;
    let (ch_a, ch_b) = rig.channels()?;
    let source_root = root.join(&source_dir);

    let mut entries = Vec::with_capacity(plans.len());
    for (i, plan) in plans.into_iter().enumerate() {
        let mix_id = format!("mix{i:04}");
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
        let (a, b) = load_plan_sources(&plan, &source_root)?;
        let dev = capture_device(device, i);
        let rec = record_pair(&a, &b, (plan.gain_a, plan.gain_b), &ch_a, &ch_b, &dev, corpus.max_retries)?;
        let twin = synthetic_twin(&a, &b, (plan.gain_a, plan.gain_b))?;

        let entry = ManifestEntry {
            gts1_path: format!("GTS/{mix_id}_s1.wav"),
            gts2_path: format!("GTS/{mix_id}_s2.wav"),
            realmix_path: format!("RealMix/{mix_id}.wav"),
            synthmix_path: format!("SynthMix/{mix_id}.wav"),
            overruns_retried: rec.attempts.retries(),
            attempts: rec.attempts,
            mix_id,
            split,
            plan,
        };
        save_wav(&rec.gts1, root.join(&entry.gts1_path))?;
        save_wav(&rec.gts2, root.join(&entry.gts2_path))?;
        save_wav(&rec.realmix, root.join(&entry.realmix_path))?;
        save_wav(&twin, root.join(&entry.synthmix_path))?;
        if entry.overruns_retried > 0 {
            log::info!("{}: {} retried captures", entry.mix_id, entry.overruns_retried);
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: corpus.seed,
        config_hash: config_hash(corpus, rig, device)?,
        split_ratio: corpus.split_ratio,
        source_dir,
        entries,
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}
