use num_complex::Complex64;

use super::{
    AudioBuffer, ComplexSpectrogram, Spectrogram, Stft, StftConfig, FULLBAND_BINS, FULLBAND_RATE,
    HIGHBAND_BINS, WIDEBAND_BINS,
};
use crate::{Error, Result};

/// Evaluation bands of the fullband signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    /// 0–8 kHz, bins 0..=256.
    Low,
    /// 8–24 kHz, bins 257..=768.
    High,
}

/// Splits a 769-bin spectrogram into its 257-bin wideband and 512-bin
/// highband parts. Bin 256 (8 kHz) goes to the wideband part.
pub fn band_split(spec: &ComplexSpectrogram) -> Result<(ComplexSpectrogram, ComplexSpectrogram)> {
    if spec.bins() != FULLBAND_BINS {
        return Err(Error::Shape(format!(
            "band_split expects {FULLBAND_BINS} bins, got {}",
            spec.bins()
        )));
    }
    let frames = spec.frames();
    let mut low = Vec::with_capacity(frames * WIDEBAND_BINS);
    let mut high = Vec::with_capacity(frames * HIGHBAND_BINS);
    for t in 0..frames {
        let (l, h) = spec.frame(t).split_at(WIDEBAND_BINS);
        low.extend_from_slice(l);
        high.extend_from_slice(h);
    }
    Ok((
        Spectrogram::from_vec(frames, WIDEBAND_BINS, low)?,
        Spectrogram::from_vec(frames, HIGHBAND_BINS, high)?,
    ))
}

/// Concatenates wideband and highband parts along frequency.
pub fn band_merge(
    wideband: &ComplexSpectrogram,
    highband: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    if wideband.bins() != WIDEBAND_BINS || highband.bins() != HIGHBAND_BINS {
        return Err(Error::Shape(format!(
            "band_merge expects {WIDEBAND_BINS} + {HIGHBAND_BINS} bins, got {} + {}",
            wideband.bins(),
            highband.bins()
        )));
    }
    if wideband.frames() != highband.frames() {
        return Err(Error::Shape(format!(
            "band_merge frame counts differ: {} vs {}",
            wideband.frames(),
            highband.frames()
        )));
    }
    let frames = wideband.frames();
    let mut data = Vec::with_capacity(frames * FULLBAND_BINS);
    for t in 0..frames {
        data.extend_from_slice(wideband.frame(t));
        data.extend_from_slice(highband.frame(t));
    }
    Spectrogram::from_vec(frames, FULLBAND_BINS, data)
}

/// STFT-domain brickwall: zeroes the complementary band and resynthesizes.
/// The output has the input's length.
pub fn bandlimit(audio: &AudioBuffer, band: Band) -> Result<AudioBuffer> {
    audio.expect_rate(FULLBAND_RATE)?;
    bandlimit_with(&Stft::new(StftConfig::fullband())?, audio, band)
}

pub(crate) fn bandlimit_with(stft: &Stft, audio: &AudioBuffer, band: Band) -> Result<AudioBuffer> {
    let mut spec = stft.analyze(audio)?;
    let zero = Complex64::new(0.0, 0.0);
    for t in 0..spec.frames() {
        let frame = spec.frame_mut(t);
        match band {
            Band::Low => frame[WIDEBAND_BINS..].fill(zero),
            Band::High => frame[..WIDEBAND_BINS].fill(zero),
        }
    }
    Ok(stft.synthesize(&spec)?.truncated(audio.len()))
}
