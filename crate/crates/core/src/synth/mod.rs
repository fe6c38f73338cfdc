//! Noisy-reverberant mixture synthesis.
//!
//! `noisy = eq(rir * speech) + g * noise`, with the target built from the
//! same speech through the first 75 ms of the RIR and the same EQ.

mod eq;
mod manifest;
mod mix;
mod rir;
pub mod toy;

use std::path::{Path, PathBuf};

pub use eq::{apply_eq, random_eq, Biquad, EqFilter, EqSection};
pub use manifest::{
    Manifest, ManifestRecord, MixtureSpec, RirSource, Split, DEFAULT_EARLY_MS, SNR_RANGE_DB,
};
pub use mix::{active_power, measured_snr, mix_at_snr, noise_gain};
pub use rir::{
    apply_rir, convolve, early_reflection_target, normalize_peak, peak_index, simulate_rir,
    EARLY_REFLECTION_MS,
};

use crate::dsp::wav::{read_wav, write_wav, WavEncoding};
use crate::dsp::{AudioBuffer, FULLBAND_RATE};
use crate::par::Exec;
use crate::{Error, Result};

/// A synthesized pair plus the speech component used for SNR measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub noisy: AudioBuffer,
    pub target: AudioBuffer,
    /// `eq(rir * speech)`, the speech part of `noisy`.
    pub speech: AudioBuffer,
    pub noise: AudioBuffer,
}

/// Combines a record seed with the run seed. Salt 0 leaves seeds unchanged.
pub fn salted(seed: u64, salt: u64) -> u64 {
    seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn load_rir(source: &RirSource, rate: u32, salt: u64) -> Result<Option<Vec<f64>>> {
    let mut rir = match source {
        RirSource::None => return Ok(None),
        RirSource::File(p) => {
            let a = read_wav(p)?;
            a.expect_rate(rate)?;
            a.into_samples()
        }
        RirSource::Simulated { t60, seed } => simulate_rir(*t60, salted(*seed, salt), rate)?,
    };
    normalize_peak(&mut rir)?;
    Ok(Some(rir))
}

/// Builds one example from a spec with resolved paths.
pub fn synthesize_example(spec: &MixtureSpec) -> Result<(AudioBuffer, AudioBuffer)> {
    let ex = synthesize_full(spec, 0)?;
    Ok((ex.noisy, ex.target))
}

/// Like [`synthesize_example`], returning all components; `salt` is mixed
/// into the RIR and EQ seeds.
pub fn synthesize_full(spec: &MixtureSpec, salt: u64) -> Result<Example> {
    spec.validate()?;
    let speech = read_wav(&spec.speech)?;
    speech.expect_rate(FULLBAND_RATE)?;
    let noise = read_wav(&spec.noise)?;
    noise.expect_rate(FULLBAND_RATE)?;
    let rir = load_rir(&spec.rir, FULLBAND_RATE, salt)?;
    synthesize_buffers(&speech, &noise, rir.as_deref(), spec, salt)
}

/// Synthesis from in-memory sources. `rir`, if given, should be
/// peak-normalized.
pub fn synthesize_buffers(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    rir: Option<&[f64]>,
    spec: &MixtureSpec,
    salt: u64,
) -> Result<Example> {
    let (mut reverberant, mut target) = match rir {
        Some(h) => (apply_rir(speech, h)?, early_reflection_target(speech, h, spec.early_ms)?),
        None => (speech.clone(), speech.clone()),
    };
    if let Some(seed) = spec.eq_seed {
        let eq = random_eq(salted(seed, salt));
        reverberant = apply_eq(&reverberant, &eq)?;
        target = apply_eq(&target, &eq)?;
    }
    let (noisy, noise) = mix_at_snr(&reverberant, noise, spec.snr_db)?;
    Ok(Example { noisy, target, speech: reverberant, noise })
}

/// Synthesizes every record of `manifest` into `out_dir` and writes the
/// augmented manifest `out_dir/manifest.tsv` (returned). Source paths in the
/// output are absolute; generated paths are relative to `out_dir`.
pub fn synthesize_manifest(manifest: &Manifest, out_dir: &Path, salt: u64, exec: Exec) -> Result<PathBuf> {
    if manifest.records.is_empty() {
        return Err(Error::Config("manifest has no records".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let indices: Vec<usize> = (0..manifest.records.len()).collect();
    let records = exec.try_map(&indices, |&i| {
        let record = &manifest.records[i];
        let spec = manifest.resolved_spec(record);
        let ex = synthesize_full(&spec, salt)?;
        let stem = spec.speech.file_stem().and_then(|s| s.to_str()).unwrap_or("mix");
        let noisy = PathBuf::from(format!("{i:05}_{stem}_noisy.wav"));
        let target = PathBuf::from(format!("{i:05}_{stem}_target.wav"));
        write_wav(out_dir.join(&noisy), &ex.noisy, WavEncoding::Float32)?;
        write_wav(out_dir.join(&target), &ex.target, WavEncoding::Float32)?;
        let mut out = spec;
        out.speech = absolute(&out.speech)?;
        out.noise = absolute(&out.noise)?;
        if let RirSource::File(p) = &out.rir {
            out.rir = RirSource::File(absolute(p)?);
        }
        if let (Some(seed), true) = (out.eq_seed, salt != 0) {
            out.eq_seed = Some(salted(seed, salt));
        }
        if let (RirSource::Simulated { t60, seed }, true) = (&out.rir, salt != 0) {
            out.rir = RirSource::Simulated { t60: *t60, seed: salted(*seed, salt) };
        }
        Ok(ManifestRecord { spec: out, noisy: Some(noisy), target: Some(target) })
    })?;
    let out = Manifest { base_dir: out_dir.to_path_buf(), records };
    let path = out_dir.join("manifest.tsv");
    out.save(&path)?;
    Ok(path)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    p.canonicalize().map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::toy::{toy_noise, toy_speech, write_toy_corpus, ToyCorpusConfig};
    use super::*;
    use crate::metrics::si_snr;

    fn sources(dir: &Path) -> (PathBuf, PathBuf) {
        let s = dir.join("s.wav");
        let n = dir.join("n.wav");
        write_wav(&s, &toy_speech(3, 1.0, 48_000).unwrap(), WavEncoding::Float32).unwrap();
        write_wav(&n, &toy_noise(3, 1.5, 48_000).unwrap(), WavEncoding::Float32).unwrap();
        (s, n)
    }

    #[test]
    fn clean_mixture_at_30_db() {
        let dir = tempfile::tempdir().unwrap();
        let (s, n) = sources(dir.path());
        let spec = MixtureSpec::new(&s, &n, 30.0);
        let (noisy, target) = synthesize_example(&spec).unwrap();
        let speech = read_wav(&s).unwrap();
        assert_eq!(target, speech);
        assert_eq!(noisy.len(), speech.len());
        // active-frame power differs slightly from whole-signal power
        let score = si_snr(speech.samples(), noisy.samples()).unwrap();
        assert!((score - 30.0).abs() < 3.0, "{score}");
        assert_eq!(synthesize_example(&spec).unwrap(), (noisy, target));
    }

    #[test]
    fn anechoic_rir_and_eq() {
        let dir = tempfile::tempdir().unwrap();
        let (s, n) = sources(dir.path());
        let rir = dir.path().join("r.wav");
        let mut h = vec![0.0; 64];
        h[0] = 0.25;
        write_wav(&rir, &AudioBuffer::new(h, 48_000).unwrap(), WavEncoding::Float32).unwrap();
        let mut spec = MixtureSpec::new(&s, &n, 5.0);
        spec.rir = RirSource::File(rir);
        let (_, target) = synthesize_example(&spec).unwrap();
        assert_eq!(target, read_wav(&s).unwrap());
        spec.eq_seed = Some(4);
        spec.rir = RirSource::Simulated { t60: 0.3, seed: 1 };
        let ex = synthesize_full(&spec, 0).unwrap();
        assert!((measured_snr(&ex.speech, ex.noise.samples()).unwrap() - 5.0).abs() < 0.01);
        assert_ne!(ex.target, ex.speech);
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = sources(dir.path());
        let spec = MixtureSpec::new(&s, dir.path().join("nope.wav"), 5.0);
        assert!(matches!(synthesize_example(&spec), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_synthesis_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { seconds: 0.5, train_files: 3, val_files: 1, test_files: 1, reverb_fraction: 0.5, ..Default::default() };
        let src = write_toy_corpus(dir.path().join("src"), &cfg).unwrap();
        let m = Manifest::load(&src).unwrap();
        let a = synthesize_manifest(&m, &dir.path().join("a"), 0, Exec::Parallel).unwrap();
        let b = synthesize_manifest(&m, &dir.path().join("b"), 0, Exec::Sequential).unwrap();
        let (ma, mb) = (Manifest::load(&a).unwrap(), Manifest::load(&b).unwrap());
        assert_eq!(ma.to_text(), mb.to_text());
        assert_eq!(ma.records.len(), 5);
        for (x, y) in ma.pairs(Split::Train).unwrap().iter().zip(mb.pairs(Split::Train).unwrap()) {
            assert_eq!(std::fs::read(&x.0).unwrap(), std::fs::read(&y.0).unwrap());
            assert_eq!(std::fs::read(&x.1).unwrap(), std::fs::read(&y.1).unwrap());
        }
        // the augmented manifest regenerates the same audio with salt 0
        let c = synthesize_manifest(&ma, &dir.path().join("c"), 0, Exec::Sequential).unwrap();
        assert_eq!(Manifest::load(&c).unwrap().to_text(), ma.to_text());
        let salted_run = synthesize_manifest(&m, &dir.path().join("d"), 9, Exec::Sequential).unwrap();
        let md = Manifest::load(&salted_run).unwrap();
        let e = synthesize_manifest(&md, &dir.path().join("e"), 0, Exec::Sequential).unwrap();
        let me = Manifest::load(&e).unwrap();
        for (x, y) in md.pairs(Split::Train).unwrap().iter().zip(me.pairs(Split::Train).unwrap()) {
            assert_eq!(std::fs::read(&x.0).unwrap(), std::fs::read(&y.0).unwrap());
        }
    }
}
