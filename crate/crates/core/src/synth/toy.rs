//! Deterministic synthetic sources for desk-scale experiments.
//!
//! Toy speech is a glottal-pulse train with gliding pitch, formant peaks and
//! a lowpass spectral tilt, cut into syllables separated by silences. Each
//! syllable gets its own tilt corner, so how much highband energy it carries
//! shows in the upper wideband. Harmonics reach 24 kHz: the highband is weak
//! but follows the same onsets as the wideband. Toy noise is white or low-frequency weighted,
//! with a slow amplitude modulation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eq::{Biquad, EqSection};
use super::manifest::{Manifest, ManifestRecord, MixtureSpec, RirSource, Split};
use crate::dsp::wav::{write_wav, WavEncoding};
use crate::dsp::{AudioBuffer, FULLBAND_RATE};
use crate::{Error, Result};

/// Range of the per-syllable one-pole lowpass corner shaping the tilt.
const TILT_RANGE_HZ: (f64, f64) = (300.0, 3000.0);

pub fn toy_speech(seed: u64, seconds: f64, sample_rate: u32) -> Result<AudioBuffer> {
    let len = (seconds * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidInput("toy speech length is zero".into()));
    }
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let mut pos = (rng.gen_range(0.02..0.15) * fs) as usize;
    while pos < len {
        let dur = ((rng.gen_range(0.12..0.35) * fs) as usize).min(len - pos);
        let f0 = rng.gen_range(90.0..240.0);
        let glide: f64 = rng.gen_range(0.8..1.25);
        let amp = rng.gen_range(0.3..1.0);
        let mut syl = vec![0.0; dur];
        let mut phase = rng.gen_range(0.0..1.0);
        for (n, v) in syl.iter_mut().enumerate() {
            let frac = n as f64 / dur as f64;
            phase += f0 * glide.powf(frac) / fs;
            if phase >= 1.0 {
                phase -= 1.0;
                *v = amp * (PI * frac).sin().sqrt();
            }
        }
        for (lo, hi) in [(300.0, 900.0), (900.0, 2800.0), (2500.0, 4000.0)] {
            let section = EqSection { center_hz: rng.gen_range(lo..hi), gain_db: 15.0, q: 4.0 };
            run(&Biquad::peaking(&section, sample_rate), &mut syl);
        }
        // brighter syllables carry more highband energy
        let corner = rng.gen_range(TILT_RANGE_HZ.0.ln()..TILT_RANGE_HZ.1.ln()).exp();
        let a = (-2.0 * PI * corner / fs).exp();
        let mut state = 0.0;
        for v in syl.iter_mut() {
            state = (1.0 - a) * *v + a * state;
            *v = state / (1.0 - a).sqrt();
        }
        out[pos..pos + dur].iter_mut().zip(&syl).for_each(|(o, s)| *o += s);
        pos += dur + (rng.gen_range(0.05..0.25) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::new(out, sample_rate)
}

fn run(bq: &Biquad, x: &mut [f64]) {
    let (mut s1, mut s2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = bq.b[0] * *v + s1;
        s1 = bq.b[1] * *v - bq.a[0] * y + s2;
        s2 = bq.b[2] * *v - bq.a[1] * y;
        *v = y;
    }
}

/// Spectral shape of toy noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// White.
    Flat,
    /// One-pole lowpass noise (1 kHz corner) over a white floor 20 dB down,
    /// so most of its power sits where speech is strongest.
    LowHeavy,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Flat => "flat",
            NoiseKind::LowHeavy => "low-heavy",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(NoiseKind::Flat),
            "low-heavy" => Ok(NoiseKind::LowHeavy),
            _ => Err(Error::Config(format!("unknown noise kind {s:?} (flat | low-heavy)"))),
        }
    }
}

const LOW_NOISE_HZ: f64 = 1000.0;

/// Flat-spectrum noise with a sinusoidal level modulation of 0.2–2 Hz.
pub fn toy_noise(seed: u64, seconds: f64, sample_rate: u32) -> Result<AudioBuffer> {
    toy_noise_kind(seed, seconds, sample_rate, NoiseKind::Flat)
}

/// Noise of the given shape under a sinusoidal level modulation of 0.2–2 Hz.
pub fn toy_noise_kind(seed: u64, seconds: f64, sample_rate: u32, kind: NoiseKind) -> Result<AudioBuffer> {
    let len = (seconds * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidInput("toy noise length is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006e_6f69_7365);
    let fs = sample_rate as f64;
    let mut envelope = || {
        let rate = rng.gen_range(0.2..2.0);
        let depth = rng.gen_range(0.0..0.6);
        let phi = rng.gen_range(0.0..2.0 * PI);
        move |n: usize| 1.0 + depth * (2.0 * PI * rate * n as f64 / fs + phi).sin()
    };
    // the floor and the lowpass part fluctuate independently
    let (floor_env, low_env) = (envelope(), envelope());
    let a = (-2.0 * PI * LOW_NOISE_HZ / fs).exp();
    // restores unit variance after the one-pole lowpass
    let low_gain = ((1.0 + a) / (1.0 - a)).sqrt();
    let mut state = 0.0;
    let x = (0..len)
        .map(|n| {
            let white = floor_env(n) * rng.gen_range(-1.0..1.0);
            let v = match kind {
                NoiseKind::Flat => white,
                NoiseKind::LowHeavy => {
                    state = (1.0 - a) * rng.gen_range(-1.0..1.0) + a * state;
                    0.1 * white + low_gain * low_env(n) * state
                }
            };
            0.1 * v
        })
        .collect();
    AudioBuffer::new(x, sample_rate)
}

/// Layout of a generated toy corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub train_files: usize,
    pub val_files: usize,
    pub test_files: usize,
    pub seconds: f64,
    pub snr_range: (f64, f64),
    /// Attach a simulated RIR (T60 0.2–0.8 s) to this fraction of records.
    pub reverb_fraction: f64,
    /// Attach an EQ seed to this fraction of records.
    pub eq_fraction: f64,
    pub noise: NoiseKind,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            train_files: 10,
            val_files: 2,
            test_files: 2,
            seconds: 6.0,
            snr_range: (-5.0, 5.0),
            reverb_fraction: 0.0,
            eq_fraction: 0.5,
            noise: NoiseKind::LowHeavy,
            seed: 0,
        }
    }
}

/// Writes toy speech and noise WAVs into `dir` together with a source
/// manifest `sources.tsv`, whose path is returned.
pub fn write_toy_corpus(dir: impl AsRef<Path>, cfg: &ToyCorpusConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let (lo, hi) = cfg.snr_range;
    if !(lo <= hi) || cfg.seconds <= 0.0 {
        return Err(Error::Config(format!("toy corpus: snr range {lo}..{hi}, {} s", cfg.seconds)));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = std::iter::repeat(Split::Train)
        .take(cfg.train_files)
        .chain(std::iter::repeat(Split::Val).take(cfg.val_files))
        .chain(std::iter::repeat(Split::Test).take(cfg.test_files));
    let mut records = Vec::new();
    for (i, split) in splits.enumerate() {
        let speech_name = format!("speech_{i:04}.wav");
        let noise_name = format!("noise_{i:04}.wav");
        let speech = toy_speech(rng.gen(), cfg.seconds, FULLBAND_RATE)?;
        let noise = toy_noise_kind(rng.gen(), cfg.seconds, FULLBAND_RATE, cfg.noise)?;
        write_wav(dir.join(&speech_name), &speech, WavEncoding::Float32)?;
        write_wav(dir.join(&noise_name), &noise, WavEncoding::Float32)?;
        let mut spec = MixtureSpec::new(speech_name, noise_name, rng.gen_range(lo..=hi));
        spec.split = split;
        if rng.gen_bool(cfg.reverb_fraction.clamp(0.0, 1.0)) {
            spec.rir = RirSource::Simulated { t60: rng.gen_range(0.2..0.8), seed: rng.gen() };
        }
        if rng.gen_bool(cfg.eq_fraction.clamp(0.0, 1.0)) {
            spec.eq_seed = Some(rng.gen());
        }
        records.push(ManifestRecord { spec, noisy: None, target: None });
    }
    let manifest = Manifest { base_dir: dir.to_path_buf(), records };
    let path = dir.join("sources.tsv");
    manifest.save(&path)?;
    Ok(path)
}
