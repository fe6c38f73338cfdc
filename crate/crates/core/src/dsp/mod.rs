//! Deterministic signal-processing kernels.

mod audio;
mod band;
mod mel;
mod stft;
pub mod wav;

pub use audio::AudioBuffer;
pub use band::{band_merge, band_split, bandlimit, Band};
pub(crate) use band::bandlimit_with;
pub use mel::{mel_mask_to_linear, mel_project, MelFilterbank};
pub use stft::{istft, stft, Stft, StftConfig};

use num_complex::Complex64;

use crate::{Error, Result};

/// Bins of the 1536-point fullband grid.
pub const FULLBAND_BINS: usize = 769;
/// Bins 0..=256 (0–8 kHz).
pub const WIDEBAND_BINS: usize = 257;
/// Bins 257..=768 (8–24 kHz).
pub const HIGHBAND_BINS: usize = 512;
pub const FULLBAND_RATE: u32 = 48_000;
pub const WIDEBAND_RATE: u32 = 16_000;

/// Time-frequency grid stored frame-major: element `(t, f)` lives at
/// `t * bins + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

pub type ComplexSpectrogram = Spectrogram<Complex64>;
pub type MagnitudeSpectrogram = Spectrogram<f64>;
/// Real-valued gain per T-F bin, nominally in `[0, 1]`.
pub type Mask = Spectrogram<f64>;

impl<T: Clone + Default> Spectrogram<T> {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![T::default(); frames * bins],
        }
    }

    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }
}

impl<T> Spectrogram<T> {
    pub fn from_vec(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Shape(format!(
                "spectrogram data has {} values, expected {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> &T {
        &self.data[t * self.bins + f]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Spectrogram<U> {
        Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Copies frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Spectrogram<T>
    where
        T: Clone,
    {
        Spectrogram {
            frames: len,
            bins: self.bins,
            data: self.data[start * self.bins..(start + len) * self.bins].to_vec(),
        }
    }
}

impl ComplexSpectrogram {
    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        self.map(|c| c.norm())
    }

    /// `mask ⊙ |Y| · e^{j∠Y}`, i.e. a real gain that keeps the noisy phase.
    pub fn apply_mask(&self, mask: &Mask) -> Result<ComplexSpectrogram> {
        if mask.frames != self.frames || mask.bins != self.bins {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match spectrogram {}x{}",
                mask.frames, mask.bins, self.frames, self.bins
            )));
        }
        Ok(Spectrogram {
            frames: self.frames,
            bins: self.bins,
            data: self
                .data
                .iter()
                .zip(&mask.data)
                .map(|(y, m)| y * *m)
                .collect(),
        })
    }
}
