//! Synthetic target-speaker scenes.
//!
//! Speakers are additive harmonic sources shaped by vowel formants, with a
//! per-speaker pitch and vocal-tract scale. A scene mixes one target utterance
//! with an interferer (another speaker or band-limited noise) at a random SIR
//! and renders the visual streams from the target:
//!
//! * lip frames: a mouth ellipse whose opening follows the target RMS
//!   envelope per video frame and whose width follows the vowel; a silent
//!   target gives an all-zero frame,
//! * expression frames: the speaker's face texture plus an affect pattern
//!   whose brightness follows a slow affect trajectory, which also modulates
//!   the target's loudness,
//! * face image: static texture plus bars encoding pitch and tract scale.
//!
//! The interferer is made zero-mean and orthogonal to the target before
//! scaling, so the mixture's SI-SDR against the target equals the drawn SIR.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Mixture length in samples.
    pub duration: usize,
    pub enrollment_duration: usize,
    pub sir_min_db: f64,
    pub sir_max_db: f64,
    pub video_fps: usize,
    /// Target speakers, ids `0..target_pool`.
    pub target_pool: usize,
    /// Interferer speakers, ids `target_pool..target_pool + interferer_pool`.
    pub interferer_pool: usize,
    /// Half-open ranges of interferer indices reserved for each split.
    pub interferers_train: [usize; 2],
    pub interferers_dev: [usize; 2],
    pub interferers_test: [usize; 2],
    /// Fraction of scenes whose interferer is filtered noise.
    pub noise_fraction: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Loudness of the target after normalisation.
    pub target_rms: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            duration: 7680,
            enrollment_duration: 8000,
            sir_min_db: -10.0,
            sir_max_db: 0.0,
            video_fps: 25,
            target_pool: 100,
            interferer_pool: 60,
            interferers_train: [0, 40],
            interferers_dev: [40, 50],
            interferers_test: [50, 60],
            noise_fraction: 0.2,
            n_train: 200,
            n_dev: 24,
            n_test: 24,
            target_rms: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn samples_per_video_frame(&self) -> usize {
        SAMPLE_RATE as usize / self.video_fps
    }

    pub fn video_frames(&self) -> usize {
        self.duration.div_ceil(self.samples_per_video_frame())
    }

    pub fn total_scenes(&self) -> usize {
        self.n_train + self.n_dev + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_pool < 2 {
            return Err(Error::Config(format!("target pool needs at least 2 speakers, got {}", self.target_pool)));
        }
        let ranges = [
            ("train", self.interferers_train),
            ("dev", self.interferers_dev),
            ("test", self.interferers_test),
        ];
        for (name, [a, b]) in ranges {
            if a >= b || b > self.interferer_pool {
                return Err(Error::Config(format!(
                    "{name} interferer range {a}..{b} invalid for pool of {}",
                    self.interferer_pool
                )));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let (ni, [a, b]) = ranges[i];
                let (nj, [c, d]) = ranges[j];
                if a < d && c < b {
                    return Err(Error::Config(format!("{ni} and {nj} interferer pools overlap")));
                }
            }
        }
        if !(self.sir_min_db <= self.sir_max_db) || !self.sir_min_db.is_finite() || !self.sir_max_db.is_finite() {
            return Err(Error::Config("SIR range must be finite with min <= max".into()));
        }
        if self.video_fps == 0 || SAMPLE_RATE as usize % self.video_fps != 0 {
            return Err(Error::Config(format!("video rate {} must divide the sample rate", self.video_fps)));
        }
        if self.duration < 2 * dsp::StftConfig::STANDARD.win || self.enrollment_duration < dsp::StftConfig::STANDARD.win {
            return Err(Error::Config("scene or enrollment too short".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("noise_fraction must lie in [0, 1]".into()));
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        Ok(())
    }
}

/// Seed derivation (splitmix64 finaliser).
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First three formants of the four vowels, Hz.
const VOWELS: [[f64; 3]; 4] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
];
/// Relative mouth width per vowel.
const VOWEL_WIDTH: [f64; 4] = [0.75, 1.0, 0.45, 0.85];

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub speaker_id: usize,
    pub f0: f64,
    /// Formant frequency scale.
    pub tract: f64,
    pub formants: [[f64; 3]; 4],
    pub texture_seed: u64,
    /// Affect oscillation rate in Hz and loudness modulation depth.
    pub affect_rate: f64,
    pub affect_depth: f64,
}

impl SpeakerModel {
    pub fn new(pool_seed: u64, speaker_id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pool_seed, 0x5EED_0000 + speaker_id as u64));
        let f0 = rng.gen_range(90.0..250.0);
        let tract = rng.gen_range(0.85..1.15);
        let mut formants = VOWELS;
        for v in formants.iter_mut() {
            for f in v.iter_mut() {
                *f *= tract * rng.gen_range(0.95..1.05);
            }
        }
        Self {
            speaker_id,
            f0,
            tract,
            formants,
            texture_seed: rng.gen(),
            affect_rate: rng.gen_range(0.5..2.0),
            affect_depth: rng.gen_range(0.2..0.5),
        }
    }

    fn formant_gain(&self, vowel: usize, f: f64) -> f64 {
        const BW: [f64; 3] = [90.0, 110.0, 170.0];
        const GAIN: [f64; 3] = [1.0, 0.5, 0.25];
        0.01 + (0..3)
            .map(|k| GAIN[k] / (1.0 + ((f - self.formants[vowel][k]) / BW[k]).powi(2)))
            .sum::<f64>()
    }

    /// A fresh utterance of `len` samples, scaled to unit RMS, plus the vowel
    /// index per sample (`None` in pauses).
    pub fn utterance(&self, len: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Option<usize>>) {
        let fs = SAMPLE_RATE as f64;
        let ms = |v: f64| (v * fs / 1000.0) as usize;
        let mut out = vec![0.0; len];
        let mut vowels = vec![None; len];
        let mut t = ms(rng.gen_range(0.0..100.0)).min(len / 4);
        while t < len {
            let dur = ms(rng.gen_range(80.0..200.0)).min(len - t);
            let vowel = rng.gen_range(0..VOWELS.len());
            let f_start = self.f0 * rng.gen_range(0.9..1.1);
            let f_end = self.f0 * rng.gen_range(0.9..1.1);
            let f_mid = 0.5 * (f_start + f_end);
            let harmonics = ((7000.0 / f_start.max(f_end)) as usize).max(1);
            let gains: Vec<f64> = (1..=harmonics)
                .map(|h| self.formant_gain(vowel, h as f64 * f_mid) / (h as f64).sqrt())
                .collect();
            let edge = ms(20.0).min(dur / 2).max(1);
            let mut phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for n in 0..dur {
                let u = n as f64 / dur as f64;
                phase += std::f64::consts::TAU * (f_start + (f_end - f_start) * u) / fs;
                let env = if n < edge {
                    0.5 - 0.5 * (std::f64::consts::PI * n as f64 / edge as f64).cos()
                } else if dur - n <= edge {
                    0.5 - 0.5 * (std::f64::consts::PI * (dur - n) as f64 / edge as f64).cos()
                } else {
                    1.0
                };
                let v: f64 = gains
                    .iter()
                    .enumerate()
                    .map(|(h, g)| g * ((h + 1) as f64 * phase).sin())
                    .sum();
                out[t + n] = env * v;
                vowels[t + n] = Some(vowel);
            }
            t += dur + ms(rng.gen_range(30.0..200.0));
        }
        normalize_rms(&mut out, 1.0);
        (out, vowels)
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn remove_mean(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Band-limited noise with a slow random loudness contour, unit RMS.
fn filtered_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let centre: f64 = rng.gen_range(300.0..3000.0);
    let q: f64 = rng.gen_range(0.7..3.0);
    // RBJ band-pass biquad
    let w0 = std::f64::consts::TAU * centre / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let rate = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..len)
        .map(|n| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            let am = 0.6 + 0.4 * (std::f64::consts::TAU * rate * n as f64 / fs + phase).sin();
            am * y
        })
        .collect();
    normalize_rms(&mut out, 1.0);
    out
}

/// Smooth random texture in [0, 1], `FRAME_SIZE x FRAME_SIZE`.
fn texture(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..FRAME_SIZE as f64),
                rng.gen_range(0.0..FRAME_SIZE as f64),
                rng.gen_range(2.0..5.0),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let mut out = vec![0.0; FRAME_SIZE * FRAME_SIZE];
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let v: f64 = blobs
                .iter()
                .map(|(cy, cx, r, a)| a * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r)).exp())
                .sum();
            out[y * FRAME_SIZE + x] = v.min(1.0);
        }
    }
    out
}

/// Rows of the expression frame carrying the affect pattern.
const AFFECT_ROWS: std::ops::Range<usize> = 11..14;

fn affect_pattern(y: usize, x: usize) -> f64 {
    if AFFECT_ROWS.contains(&y) && (3..13).contains(&x) {
        // an upturned arc: brighter towards the corners
        0.6 + 0.4 * ((x as f64 - 7.5).abs() / 4.5)
    } else {
        0.0
    }
}

/// Mouth ellipse for a given opening in [0, 1] and relative width.
fn mouth(opening: f64, width: f64, out: &mut [f32]) {
    let (cy, cx) = (8.0, 7.5);
    let ry = 0.5 + 5.5 * opening;
    let rx = 1.5 + 5.0 * width;
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let r = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
            let inside = 1.0 / (1.0 + ((r - 1.0) * 6.0).exp());
            out[y * FRAME_SIZE + x] = (opening * inside) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentAudio {
    pub samples: Vec<f32>,
    pub speaker_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub speaker_id: usize,
    /// `None` when the interferer is noise.
    pub interferer_id: Option<usize>,
    pub sir_db: f64,
    pub target: Vec<f32>,
    /// Already scaled: `mixture == target + interferer`.
    pub interferer: Vec<f32>,
    pub mixture: Vec<f32>,
    pub enrollment: EnrollmentAudio,
    /// `[1, Tv, 16, 16]`
    pub lip_frames: Tensor<f32>,
    /// `[1, 16, 16]`
    pub face_image: Tensor<f32>,
    /// `[1, Tv, 16, 16]`
    pub expr_frames: Tensor<f32>,
    /// Per video frame: target RMS and affect value, kept for probes.
    pub rms_envelope: Vec<f32>,
    pub affect: Vec<f32>,
}

impl Scene {
    pub fn video_frames(&self) -> usize {
        self.lip_frames.shape()[1]
    }
}

/// Split membership of a scene id.
pub fn split_of(config: &SceneConfig, id: usize) -> Result<Split> {
    if id < config.n_train {
        Ok(Split::Train)
    } else if id < config.n_train + config.n_dev {
        Ok(Split::Dev)
    } else if id < config.total_scenes() {
        Ok(Split::Test)
    } else {
        Err(Error::Input(format!("scene id {id} outside the {} configured scenes", config.total_scenes())))
    }
}

/// Deterministic scene `id` of the configured corpus.
pub fn make_scene(config: &SceneConfig, id: usize) -> Result<Scene> {
    config.validate()?;
    let split = split_of(config, id)?;
    let seed = derive_seed(config.seed, id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = config.duration;
    let speaker_id = rng.gen_range(0..config.target_pool);
    let speaker = SpeakerModel::new(config.seed, speaker_id);
    let [lo, hi] = match split {
        Split::Train => config.interferers_train,
        Split::Dev => config.interferers_dev,
        Split::Test => config.interferers_test,
    };
    let is_noise = rng.gen_bool(config.noise_fraction);
    let interferer_id = config.target_pool + rng.gen_range(lo..hi);
    let sir_db = if config.sir_max_db > config.sir_min_db {
        rng.gen_range(config.sir_min_db..config.sir_max_db)
    } else {
        config.sir_min_db
    };

    let (mut target, vowels) = speaker.utterance(len, &mut rng);
    let fs = SAMPLE_RATE as f64;
    let affect_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let affect_at = |n: usize| 0.5 + 0.5 * (std::f64::consts::TAU * speaker.affect_rate * n as f64 / fs + affect_phase).sin();
    for (n, v) in target.iter_mut().enumerate() {
        *v *= 1.0 + speaker.affect_depth * (2.0 * affect_at(n) - 1.0);
    }
    remove_mean(&mut target);
    normalize_rms(&mut target, config.target_rms);

    let mut interferer = if is_noise {
        filtered_noise(len, &mut rng)
    } else {
        SpeakerModel::new(config.seed, interferer_id).utterance(len, &mut rng).0
    };
    remove_mean(&mut interferer);
    let tt: f64 = target.iter().map(|v| v * v).sum();
    if tt > 0.0 {
        let proj = interferer.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>() / tt;
        interferer.iter_mut().zip(&target).for_each(|(i, t)| *i -= proj * t);
    }
    let ii: f64 = interferer.iter().map(|v| v * v).sum();
    let gain = (tt / ii / 10f64.powf(sir_db / 10.0)).sqrt();
    let target_f: Vec<f32> = target.iter().map(|&v| v as f32).collect();
    let interferer_f: Vec<f32> = interferer.iter().map(|&v| (v * gain) as f32).collect();
    let mixture: Vec<f32> = target_f.iter().zip(&interferer_f).map(|(a, b)| a + b).collect();

    let mut enroll_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE1));
    let (mut enroll, _) = speaker.utterance(config.enrollment_duration, &mut enroll_rng);
    normalize_rms(&mut enroll, config.target_rms);

    // visual streams at video rate
    let spf = config.samples_per_video_frame();
    let tv = config.video_frames();
    let px = FRAME_SIZE * FRAME_SIZE;
    let tex = texture(speaker.texture_seed);
    let mut lip = vec![0f32; tv * px];
    let mut expr = vec![0f32; tv * px];
    let mut rms_envelope = Vec::with_capacity(tv);
    let mut affect = Vec::with_capacity(tv);
    for f in 0..tv {
        let (a, b) = (f * spf, ((f + 1) * spf).min(len));
        let rms = if a < b {
            (target[a..b].iter().map(|v| v * v).sum::<f64>() / (b - a) as f64).sqrt()
        } else {
            0.0
        };
        let centre = ((a + b) / 2).min(len - 1);
        let vowel = vowels[a.min(len - 1)..b.max(a + 1).min(len)]
            .iter()
            .flatten()
            .next()
            .copied()
            .unwrap_or(0);
        let opening = (rms / (2.5 * config.target_rms)).min(1.0);
        mouth(opening, VOWEL_WIDTH[vowel], &mut lip[f * px..(f + 1) * px]);
        let aff = affect_at(centre);
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                expr[f * px + y * FRAME_SIZE + x] = (0.3 * tex[y * FRAME_SIZE + x] + aff * affect_pattern(y, x)) as f32;
            }
        }
        rms_envelope.push(rms as f32);
        affect.push(aff as f32);
    }
    let f0_level = (speaker.f0 - 90.0) / 160.0;
    let tract_level = (speaker.tract - 0.85) / 0.3;
    let face: Vec<f32> = (0..px)
        .map(|i| {
            let y = i / FRAME_SIZE;
            let v = match y {
                0..=2 => f0_level,
                13..=15 => tract_level,
                _ => tex[i],
            };
            v as f32
        })
        .collect();

    Ok(Scene {
        id,
        seed,
        speaker_id,
        interferer_id: (!is_noise).then_some(interferer_id),
        sir_db,
        target: target_f,
        interferer: interferer_f,
        mixture,
        enrollment: EnrollmentAudio {
            samples: enroll.iter().map(|&v| v as f32).collect(),
            speaker_id,
        },
        lip_frames: Tensor::new(&[1, tv, FRAME_SIZE, FRAME_SIZE], lip)?,
        face_image: Tensor::new(&[1, FRAME_SIZE, FRAME_SIZE], face)?,
        expr_frames: Tensor::new(&[1, tv, FRAME_SIZE, FRAME_SIZE], expr)?,
        rms_envelope,
        affect,
    })
}

/// Per-video-frame availability; `0` marks a missing frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingMask {
    pub frames: Vec<u8>,
    pub rate: f64,
    pub block_len: usize,
}

impl MissingMask {
    pub fn all_present(len: usize) -> Self {
        Self { frames: vec![1; len], rate: 0.0, block_len: 1 }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.frames.iter().filter(|&&v| v == 0).count() as f64 / self.frames.len().max(1) as f64
    }
}

pub const DEFAULT_BLOCK_LEN: usize = 10;

/// Drops consecutive blocks of `block_len` frames, each independently with
/// probability `rate`.
pub fn missing_mask(t_video: usize, rate: f64, block_len: usize, seed: u64) -> Result<MissingMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate {rate} outside [0, 1]")));
    }
    if block_len == 0 {
        return Err(Error::Config("block_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(t_video);
    while frames.len() < t_video {
        let keep = if rng.gen::<f64>() < rate { 0 } else { 1 };
        let n = block_len.min(t_video - frames.len());
        frames.extend(std::iter::repeat(keep).take(n));
    }
    Ok(MissingMask { frames, rate, block_len })
}

/// Zero-fills masked lip and expression frames. Face and enrollment are left
/// untouched.
pub fn apply_missing(scene: &Scene, mask: &MissingMask) -> Result<Scene> {
    let tv = scene.video_frames();
    if mask.len() != tv {
        return Err(Error::shape("apply_missing", format!("mask has {} frames, scene {tv}", mask.len())));
    }
    let mut out = scene.clone();
    let px = FRAME_SIZE * FRAME_SIZE;
    for (f, &keep) in mask.frames.iter().enumerate() {
        if keep == 0 {
            out.lip_frames.data_mut()[f * px..(f + 1) * px].fill(0.0);
            out.expr_frames.data_mut()[f * px..(f + 1) * px].fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(config: &SceneConfig) -> Result<SplitIds> {
    config.validate()?;
    let a = config.n_train;
    let b = a + config.n_dev;
    Ok(SplitIds {
        train: (0..a).collect(),
        dev: (a..b).collect(),
        test: (b..config.total_scenes()).collect(),
    })
}

// ---------------------------------------------------------------------------
// on-disk cache

const WAVEFORMS: [&str; 4] = ["target", "interferer", "mixture", "enrollment"];

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("scene_{id:05}"))
}

/// Writes one scene: WAV files for listening plus exact raw copies.
pub fn save_scene(root: &Path, scene: &Scene) -> Result<()> {
    let dir = scene_dir(root, scene.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let waves = [&scene.target, &scene.interferer, &scene.mixture, &scene.enrollment.samples];
    for (name, wave) in WAVEFORMS.iter().zip(waves) {
        dsp::write_wav(&dir.join(format!("{name}.wav")), wave, SAMPLE_RATE)?;
        write_f32(&dir.join(format!("{name}.f32")), wave)?;
    }
    write_f32(&dir.join("lip.f32"), scene.lip_frames.data())?;
    write_f32(&dir.join("expr.f32"), scene.expr_frames.data())?;
    write_f32(&dir.join("face.f32"), scene.face_image.data())?;
    write_f32(&dir.join("rms.f32"), &scene.rms_envelope)?;
    write_f32(&dir.join("affect.f32"), &scene.affect)?;
    let meta = format!(
        "id={}\nseed={}\nspeaker_id={}\ninterferer_id={}\nsir_db={}\nvideo_frames={}\n",
        scene.id,
        scene.seed,
        scene.speaker_id,
        scene.interferer_id.map_or("noise".to_string(), |v| v.to_string()),
        scene.sir_db,
        scene.video_frames(),
    );
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn load_scene(root: &Path, id: usize) -> Result<Scene> {
    let dir = scene_dir(root, id);
    let path = dir.join("meta.txt");
    let meta = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let field = |key: &str| -> Result<&str> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("{} lacks {key}", path.display())))
    };
    let parse_err = |key: &str| Error::Format(format!("{}: bad {key}", path.display()));
    let seed: u64 = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
    let speaker_id: usize = field("speaker_id")?.parse().map_err(|_| parse_err("speaker_id"))?;
    let interferer_id = match field("interferer_id")? {
        "noise" => None,
        v => Some(v.parse().map_err(|_| parse_err("interferer_id"))?),
    };
    let sir_db: f64 = field("sir_db")?.parse().map_err(|_| parse_err("sir_db"))?;
    let tv: usize = field("video_frames")?.parse().map_err(|_| parse_err("video_frames"))?;
    let mut waves = Vec::new();
    for name in WAVEFORMS {
        waves.push(read_f32(&dir.join(format!("{name}.f32")))?);
    }
    let enrollment = waves.pop().unwrap_or_default();
    let mixture = waves.pop().unwrap_or_default();
    let interferer = waves.pop().unwrap_or_default();
    let target = waves.pop().unwrap_or_default();
    let frame = [1, tv, FRAME_SIZE, FRAME_SIZE];
    Ok(Scene {
        id,
        seed,
        speaker_id,
        interferer_id,
        sir_db,
        target,
        interferer,
        mixture,
        enrollment: EnrollmentAudio { samples: enrollment, speaker_id },
        lip_frames: Tensor::new(&frame, read_f32(&dir.join("lip.f32"))?)?,
        face_image: Tensor::new(&[1, FRAME_SIZE, FRAME_SIZE], read_f32(&dir.join("face.f32"))?)?,
        expr_frames: Tensor::new(&frame, read_f32(&dir.join("expr.f32"))?)?,
        rms_envelope: read_f32(&dir.join("rms.f32"))?,
        affect: read_f32(&dir.join("affect.f32"))?,
    })
}

pub fn manifest_line(scene: &Scene) -> String {
    format!("{} {} {} {:.6}", scene.id, scene.seed, scene.speaker_id, scene.sir_db)
}

/// Generates every scene of the configuration under `root` and writes
/// `manifest.txt` (one `id seed speaker_id sir_db` line per scene).
pub fn generate_cache(config: &SceneConfig, root: &Path) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let scenes: Vec<Scene> = (0..config.total_scenes())
        .into_par_iter()
        .map(|id| make_scene(config, id))
        .collect::<Result<_>>()?;
    let path = root.join("manifest.txt");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for scene in &scenes {
        save_scene(root, scene)?;
        writeln!(file, "{}", manifest_line(scene)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(scenes)
}

/// Loads the scenes listed by `ids`, regenerating nothing.
pub fn load_scenes(root: &Path, ids: &[usize]) -> Result<Vec<Scene>> {
    ids.iter().map(|&id| load_scene(root, id)).collect()
}
