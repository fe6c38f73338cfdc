//! Inference pipelines: one-step fullband masking (linear or mel features),
//! two-step band-split enhancement and a standalone 16 kHz wideband enhancer.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dsp::{
    band_merge, band_split, mel_mask_to_linear, mel_project, AudioBuffer, ComplexSpectrogram,
    MagnitudeSpectrogram, Mask, MelFilterbank, Stft, StftConfig, FULLBAND_BINS, FULLBAND_RATE,
    HIGHBAND_BINS, WIDEBAND_BINS, WIDEBAND_RATE,
};
use crate::nn::{load_checkpoint, NetKind, Network};
use crate::{Error, Result};

/// Input/output representation of a one-step network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// All 769 linear bins.
    Stft,
    /// Mel bands of the 769-bin magnitude.
    Mel(usize),
}

impl Feature {
    pub fn dim(self) -> usize {
        match self {
            Feature::Stft => FULLBAND_BINS,
            Feature::Mel(n) => n,
        }
    }

    pub fn filterbank(self) -> Result<Option<MelFilterbank>> {
        match self {
            Feature::Stft => Ok(None),
            Feature::Mel(n) => MelFilterbank::fullband(n).map(Some),
        }
    }
}

/// What the highband network's lower stream sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AidMode {
    /// `|S16|`, the wideband estimate.
    Estimated,
    /// All zeros.
    None,
    /// `|Y16|`, the noisy wideband magnitude.
    Noisy,
}

impl AidMode {
    pub const ALL: [AidMode; 3] = [AidMode::Estimated, AidMode::None, AidMode::Noisy];

    pub fn as_str(self) -> &'static str {
        match self {
            AidMode::Estimated => "e16k",
            AidMode::None => "none",
            AidMode::Noisy => "n16k",
        }
    }
}

impl fmt::Display for AidMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AidMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e16k" | "estimated" => Ok(AidMode::Estimated),
            "none" => Ok(AidMode::None),
            "n16k" | "noisy" => Ok(AidMode::Noisy),
            _ => Err(Error::Config(format!("unknown aid mode {s:?} (e16k | none | n16k)"))),
        }
    }
}

/// Experimental conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    Fft768,
    Mel48,
    Mel64,
    Mel80,
    TwoStep(AidMode),
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 7] = [
        ConditionKind::Fft768,
        ConditionKind::Mel48,
        ConditionKind::Mel64,
        ConditionKind::Mel80,
        ConditionKind::TwoStep(AidMode::Estimated),
        ConditionKind::TwoStep(AidMode::None),
        ConditionKind::TwoStep(AidMode::Noisy),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Fft768 => "FFT768",
            ConditionKind::Mel48 => "Mel48",
            ConditionKind::Mel64 => "Mel64",
            ConditionKind::Mel80 => "Mel80",
            ConditionKind::TwoStep(AidMode::Estimated) => "TS_FFT768_e16k",
            ConditionKind::TwoStep(AidMode::None) => "TS_FFT768",
            ConditionKind::TwoStep(AidMode::Noisy) => "TS_FFT768_n16k",
        }
    }

    /// One-step feature, or `None` for two-step conditions.
    pub fn feature(self) -> Option<Feature> {
        match self {
            ConditionKind::Fft768 => Some(Feature::Stft),
            ConditionKind::Mel48 => Some(Feature::Mel(48)),
            ConditionKind::Mel64 => Some(Feature::Mel(64)),
            ConditionKind::Mel80 => Some(Feature::Mel(80)),
            ConditionKind::TwoStep(_) => None,
        }
    }

    pub fn aid(self) -> Option<AidMode> {
        match self {
            ConditionKind::TwoStep(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_two_step(self) -> bool {
        self.aid().is_some()
    }

    pub fn checkpoint_count(self) -> usize {
        if self.is_two_step() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

/// A condition with its checkpoints: one for one-step kinds, `[dnn16,
/// dnn16_48]` for two-step kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub checkpoints: Vec<PathBuf>,
}

impl Condition {
    pub fn new(kind: ConditionKind, checkpoints: Vec<PathBuf>) -> Result<Self> {
        if checkpoints.len() != kind.checkpoint_count() {
            return Err(Error::Config(format!(
                "{kind} takes {} checkpoint(s), got {}",
                kind.checkpoint_count(),
                checkpoints.len()
            )));
        }
        Ok(Condition { kind, checkpoints })
    }
}

/// Anything producing a mask from magnitude inputs. Networks implement it;
/// [`ForcedMask`] substitutes a constant for plumbing tests.
pub trait MaskEstimator: Sync {
    fn input_dims(&self) -> Vec<usize>;
    fn output_dim(&self) -> usize;
    fn estimate(&self, inputs: &[&MagnitudeSpectrogram]) -> Result<Mask>;
}

impl MaskEstimator for Network {
    fn input_dims(&self) -> Vec<usize> {
        Network::input_dims(self)
    }
    fn output_dim(&self) -> usize {
        Network::output_dim(self)
    }
    fn estimate(&self, inputs: &[&MagnitudeSpectrogram]) -> Result<Mask> {
        self.infer(inputs)
    }
}

/// A constant mask with a given input/output signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedMask {
    pub input_dims: Vec<usize>,
    pub output_dim: usize,
    pub value: f64,
}

impl ForcedMask {
    pub fn like(est: &dyn MaskEstimator, value: f64) -> Self {
        ForcedMask { input_dims: est.input_dims(), output_dim: est.output_dim(), value }
    }

    pub fn one_step(feature: Feature, value: f64) -> Self {
        ForcedMask { input_dims: vec![feature.dim()], output_dim: feature.dim(), value }
    }

    pub fn wideband(value: f64) -> Self {
        ForcedMask { input_dims: vec![WIDEBAND_BINS], output_dim: WIDEBAND_BINS, value }
    }

    pub fn highband(value: f64) -> Self {
        ForcedMask { input_dims: vec![HIGHBAND_BINS, WIDEBAND_BINS], output_dim: HIGHBAND_BINS, value }
    }
}

impl MaskEstimator for ForcedMask {
    fn input_dims(&self) -> Vec<usize> {
        self.input_dims.clone()
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn estimate(&self, inputs: &[&MagnitudeSpectrogram]) -> Result<Mask> {
        let frames = inputs.first().map_or(0, |m| m.frames());
        Ok(Mask::filled(frames, self.output_dim, self.value))
    }
}

fn expect_signature(est: &dyn MaskEstimator, inputs: &[usize], output: usize, role: &str) -> Result<()> {
    if est.input_dims() != inputs || est.output_dim() != output {
        return Err(Error::Checkpoint(format!(
            "{role} network maps {:?} -> {}, expected {inputs:?} -> {output}",
            est.input_dims(),
            est.output_dim()
        )));
    }
    Ok(())
}

/// Network input for a one-step condition from the 769-bin noisy magnitude.
pub fn one_step_input(mag: &MagnitudeSpectrogram, fb: Option<&MelFilterbank>) -> Result<MagnitudeSpectrogram> {
    match fb {
        Some(fb) => mel_project(mag, fb),
        None => Ok(mag.clone()),
    }
}

/// Lower-stream input of the highband network.
pub fn aid_input(aid: AidMode, noisy16: &MagnitudeSpectrogram, estimate16: &MagnitudeSpectrogram) -> MagnitudeSpectrogram {
    match aid {
        AidMode::Estimated => estimate16.clone(),
        AidMode::None => MagnitudeSpectrogram::zeros(noisy16.frames(), noisy16.bins()),
        AidMode::Noisy => noisy16.clone(),
    }
}

/// Masks the 769-bin spectrogram `noisy` with a one-step estimator.
pub fn one_step_spectrum(
    est: &dyn MaskEstimator,
    noisy: &ComplexSpectrogram,
    feature: Feature,
) -> Result<ComplexSpectrogram> {
    expect_signature(est, &[feature.dim()], feature.dim(), "one-step")?;
    let fb = feature.filterbank()?;
    let input = one_step_input(&noisy.magnitude(), fb.as_ref())?;
    let mut mask = est.estimate(&[&input])?;
    if let Some(fb) = &fb {
        mask = mel_mask_to_linear(&mask, fb)?;
    }
    noisy.apply_mask(&mask)
}

/// `istft(Y ⊙ M)` for a 48 kHz input, truncated to the input length.
pub fn enhance_one_step(est: &dyn MaskEstimator, audio: &AudioBuffer, feature: Feature) -> Result<AudioBuffer> {
    audio.expect_rate(FULLBAND_RATE)?;
    let stft = Stft::new(StftConfig::fullband())?;
    let noisy = stft.analyze(audio)?;
    let enhanced = one_step_spectrum(est, &noisy, feature)?;
    finish(stft.synthesize(&enhanced)?, audio.len())
}

/// Intermediate spectra of the two-step pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepSpectra {
    /// `Y16 ⊙ M16`, independent of the aid mode.
    pub wideband: ComplexSpectrogram,
    /// `Y16-48 ⊙ M16-48`.
    pub highband: ComplexSpectrogram,
}

impl TwoStepSpectra {
    pub fn merged(&self) -> Result<ComplexSpectrogram> {
        band_merge(&self.wideband, &self.highband)
    }
}

pub fn two_step_spectra(
    dnn16: &dyn MaskEstimator,
    dnn16_48: &dyn MaskEstimator,
    noisy: &ComplexSpectrogram,
    aid: AidMode,
) -> Result<TwoStepSpectra> {
    expect_signature(dnn16, &[WIDEBAND_BINS], WIDEBAND_BINS, "wideband")?;
    expect_signature(dnn16_48, &[HIGHBAND_BINS, WIDEBAND_BINS], HIGHBAND_BINS, "highband")?;
    let (y16, y48) = band_split(noisy)?;
    let y16_mag = y16.magnitude();
    let wideband = y16.apply_mask(&dnn16.estimate(&[&y16_mag])?)?;
    let lower = aid_input(aid, &y16_mag, &wideband.magnitude());
    let m48 = dnn16_48.estimate(&[&y48.magnitude(), &lower])?;
    let highband = y48.apply_mask(&m48)?;
    Ok(TwoStepSpectra { wideband, highband })
}

/// Wideband step, highband step conditioned per `aid`, merge, resynthesis.
pub fn enhance_two_step(
    dnn16: &dyn MaskEstimator,
    dnn16_48: &dyn MaskEstimator,
    audio: &AudioBuffer,
    aid: AidMode,
) -> Result<AudioBuffer> {
    audio.expect_rate(FULLBAND_RATE)?;
    let stft = Stft::new(StftConfig::fullband())?;
    let spectra = two_step_spectra(dnn16, dnn16_48, &stft.analyze(audio)?, aid)?;
    finish(stft.synthesize(&spectra.merged()?)?, audio.len())
}

/// Runs the wideband network alone on 16 kHz audio, using the 512/160 grid
/// whose bins coincide with the fullband wideband bins.
pub fn wideband_16k_adapter(dnn16: &dyn MaskEstimator, audio: &AudioBuffer) -> Result<AudioBuffer> {
    audio.expect_rate(WIDEBAND_RATE)?;
    expect_signature(dnn16, &[WIDEBAND_BINS], WIDEBAND_BINS, "wideband")?;
    let stft = Stft::new(StftConfig::wideband())?;
    let y = stft.analyze(audio)?;
    let mask = dnn16.estimate(&[&y.magnitude()])?;
    finish(stft.synthesize(&y.apply_mask(&mask)?)?, audio.len())
}

fn finish(out: AudioBuffer, len: usize) -> Result<AudioBuffer> {
    let out = out.truncated(len);
    if out.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("enhanced audio".into()));
    }
    Ok(out)
}

/// Networks loaded for a condition.
#[derive(Debug, Clone)]
pub enum Enhancer {
    OneStep { net: Network, feature: Feature },
    TwoStep { dnn16: Network, dnn16_48: Network, aid: AidMode },
}

impl Enhancer {
    pub fn load(condition: &Condition) -> Result<Self> {
        let kind = condition.kind;
        if condition.checkpoints.len() != kind.checkpoint_count() {
            return Err(Error::Config(format!("{kind} takes {} checkpoint(s)", kind.checkpoint_count())));
        }
        let enhancer = match (kind.feature(), kind.aid()) {
            (Some(feature), _) => Enhancer::OneStep { net: load_checkpoint(&condition.checkpoints[0])?, feature },
            (None, Some(aid)) => {
                let dnn16 = load_checkpoint(&condition.checkpoints[0])?;
                let dnn16_48 = load_checkpoint(&condition.checkpoints[1])?;
                if dnn16_48.kind() != NetKind::CrnnHighband {
                    return Err(Error::Checkpoint(format!(
                        "highband checkpoint holds a {}, expected {}",
                        dnn16_48.kind(),
                        NetKind::CrnnHighband
                    )));
                }
                Enhancer::TwoStep { dnn16, dnn16_48, aid }
            }
            (None, None) => unreachable!("every condition is one- or two-step"),
        };
        enhancer.check()?;
        Ok(enhancer)
    }

    fn check(&self) -> Result<()> {
        match self {
            Enhancer::OneStep { net, feature } => expect_signature(net, &[feature.dim()], feature.dim(), "one-step"),
            Enhancer::TwoStep { dnn16, dnn16_48, .. } => {
                expect_signature(dnn16, &[WIDEBAND_BINS], WIDEBAND_BINS, "wideband")?;
                expect_signature(dnn16_48, &[HIGHBAND_BINS, WIDEBAND_BINS], HIGHBAND_BINS, "highband")
            }
        }
    }

    pub fn enhance(&self, audio: &AudioBuffer) -> Result<AudioBuffer> {
        match self {
            Enhancer::OneStep { net, feature } => enhance_one_step(net, audio, *feature),
            Enhancer::TwoStep { dnn16, dnn16_48, aid } => enhance_two_step(dnn16, dnn16_48, audio, *aid),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{save_checkpoint, CrnnHighbandConfig, EncoderDecoderConfig, NetConfig, StackedLstmConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, rate: u32, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), rate).unwrap()
    }

    fn interior_rel_err(a: &AudioBuffer, b: &AudioBuffer, edge: usize) -> f64 {
        let r = edge..a.len() - edge;
        let num: f64 = a.samples()[r.clone()].iter().zip(&b.samples()[r.clone()]).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = a.samples()[r].iter().map(|x| x * x).sum();
        (num / den).sqrt()
    }

    #[test]
    fn identity_masks_reproduce_input() {
        let x = noise(48_000, 48_000, 1);
        for feature in [Feature::Stft, Feature::Mel(48), Feature::Mel(64), Feature::Mel(80)] {
            let y = enhance_one_step(&ForcedMask::one_step(feature, 1.0), &x, feature).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(interior_rel_err(&x, &y, 1536) < 1e-6, "{feature:?}");
        }
        for aid in AidMode::ALL {
            let y = enhance_two_step(&ForcedMask::wideband(1.0), &ForcedMask::highband(1.0), &x, aid).unwrap();
            assert!(interior_rel_err(&x, &y, 1536) < 1e-6, "{aid}");
        }
        let x16 = noise(16_000, 16_000, 2);
        let y = wideband_16k_adapter(&ForcedMask::wideband(1.0), &x16).unwrap();
        assert_eq!((y.len(), y.sample_rate()), (x16.len(), 16_000));
        assert!(interior_rel_err(&x16, &y, 512) < 1e-6);
    }

    #[test]
    fn zero_masks_silence() {
        let x = noise(20_000, 48_000, 3);
        let y = enhance_one_step(&ForcedMask::one_step(Feature::Mel(80), 0.0), &x, Feature::Mel(80)).unwrap();
        assert!(y.samples().iter().all(|v| *v == 0.0));
        let y = enhance_two_step(&ForcedMask::wideband(0.0), &ForcedMask::highband(0.0), &x, AidMode::None).unwrap();
        assert!(y.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rate_and_dimension_errors() {
        let x16 = noise(1600, 16_000, 4);
        assert!(matches!(
            enhance_one_step(&ForcedMask::one_step(Feature::Stft, 1.0), &x16, Feature::Stft),
            Err(Error::SampleRate { .. })
        ));
        let x = noise(4800, 48_000, 4);
        assert!(matches!(
            enhance_one_step(&ForcedMask::one_step(Feature::Mel(64), 1.0), &x, Feature::Mel(80)),
            Err(Error::Checkpoint(_))
        ));
        assert!(enhance_two_step(&ForcedMask::highband(1.0), &ForcedMask::highband(1.0), &x, AidMode::None).is_err());
        assert!(wideband_16k_adapter(&ForcedMask::wideband(1.0), &x).is_err());
    }

    /// Records the lower-stream input it receives.
    struct Spy(std::sync::Mutex<Option<MagnitudeSpectrogram>>);

    impl MaskEstimator for Spy {
        fn input_dims(&self) -> Vec<usize> {
            vec![HIGHBAND_BINS, WIDEBAND_BINS]
        }
        fn output_dim(&self) -> usize {
            HIGHBAND_BINS
        }
        fn estimate(&self, inputs: &[&MagnitudeSpectrogram]) -> Result<Mask> {
            *self.0.lock().unwrap() = Some(inputs[1].clone());
            Ok(Mask::filled(inputs[0].frames(), HIGHBAND_BINS, 0.5))
        }
    }

    #[test]
    fn aid_modes_route_lower_stream() {
        let x = noise(9600, 48_000, 5);
        let y = Stft::new(StftConfig::fullband()).unwrap().analyze(&x).unwrap();
        let (y16, _) = band_split(&y).unwrap();
        let dnn16 = ForcedMask::wideband(0.25);
        let spy = Spy(Default::default());
        let mut wide = Vec::new();
        for aid in AidMode::ALL {
            let s = two_step_spectra(&dnn16, &spy, &y, aid).unwrap();
            let seen = spy.0.lock().unwrap().take().unwrap();
            let expect = match aid {
                AidMode::Estimated => y16.magnitude().map(|v| 0.25 * v),
                AidMode::None => MagnitudeSpectrogram::zeros(y16.frames(), 257),
                AidMode::Noisy => y16.magnitude(),
            };
            assert!(seen.data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() < 1e-12), "{aid}");
            wide.push(s.wideband);
        }
        assert!(wide.iter().all(|w| *w == wide[0]));
    }

    #[test]
    fn real_networks_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let dnn16 = Network::build(NetConfig::EncoderDecoder(EncoderDecoderConfig::toy(257)), 1).unwrap();
        let dnn48 = Network::build(NetConfig::CrnnHighband(CrnnHighbandConfig::toy()), 2).unwrap();
        let mel = Network::build(NetConfig::StackedLstm(StackedLstmConfig::toy(80)), 3).unwrap();
        let (p16, p48, pmel) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        save_checkpoint(&dnn16, &p16).unwrap();
        save_checkpoint(&dnn48, &p48).unwrap();
        save_checkpoint(&mel, &pmel).unwrap();
        let x = noise(9600, 48_000, 6);
        let two = Enhancer::load(&Condition::new(ConditionKind::TwoStep(AidMode::Estimated), vec![p16.clone(), p48.clone()]).unwrap()).unwrap();
        let out = two.enhance(&x).unwrap();
        assert_eq!(out.len(), x.len());
        assert!(out.samples().iter().all(|v| v.is_finite()));
        let one = Enhancer::load(&Condition::new(ConditionKind::Mel80, vec![pmel.clone()]).unwrap()).unwrap();
        assert_eq!(one.enhance(&x).unwrap().len(), x.len());
        // wrong dimension for the condition
        assert!(matches!(Enhancer::load(&Condition::new(ConditionKind::Mel64, vec![pmel]).unwrap()), Err(Error::Checkpoint(_))));
        assert!(Enhancer::load(&Condition::new(ConditionKind::TwoStep(AidMode::None), vec![p48.clone(), p16.clone()]).unwrap()).is_err());
        assert!(Condition::new(ConditionKind::Fft768, vec![p16.clone(), p48]).is_err());
        // the same wideband checkpoint runs at 16 kHz
        let y = wideband_16k_adapter(&load_checkpoint(&p16).unwrap(), &noise(3200, 16_000, 7)).unwrap();
        assert_eq!(y.len(), 3200);
    }

    #[test]
    fn condition_names() {
        for k in ConditionKind::ALL {
            assert_eq!(k.as_str().parse::<ConditionKind>().unwrap(), k);
        }
        assert_eq!("ts_fft768_n16k".parse::<ConditionKind>().unwrap(), ConditionKind::TwoStep(AidMode::Noisy));
        assert!("FFT512".parse::<ConditionKind>().is_err());
    }
}
