//! Two-step band-split fullband speech enhancement.
//!
//! A 48 kHz noisy signal is analysed with a 1536-point / 480-hop STFT. The
//! 769 bins are split into a wideband part (bins 0..=256, 0–8 kHz) handled by
//! a standalone wideband enhancer, and a highband part (bins 257..=768,
//! 8–24 kHz) handled by a convolutional recurrent network that also sees the
//! wideband estimate. One-step fullband baselines (linear STFT and mel
//! features) share the same plumbing.
//!
//! Module map:
//!
//! * [`dsp`]: STFT/ISTFT, band split/merge, mel filterbanks, band limiting, WAV I/O
//! * [`autodiff`]: tensors, a reverse-mode tape and the Adam optimizer
//! * [`nn`]: the encoder-decoder, stacked-LSTM and CRNN highband networks, checkpoints
//! * [`loss`]: the IAM-weighted mean absolute logarithmic error
//! * [`synth`]: SNR mixing, RIR convolution, early-reflection targets, EQ, manifests
//! * [`enhance`]: one-step, two-step and 16 kHz inference pipelines
//! * [`metrics`]: SiSNR, SDR, band-limited scoring and frequency-dependent SNR
//! * [`train`]: training loop, validation and the plateau learning-rate schedule

pub mod autodiff;
pub mod dsp;
pub mod enhance;
mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod synth;
pub mod train;

pub use dsp::{AudioBuffer, ComplexSpectrogram, MagnitudeSpectrogram, Mask, StftConfig};
pub use error::{Error, Result};
