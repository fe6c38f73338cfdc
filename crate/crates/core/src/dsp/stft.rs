use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, ComplexSpectrogram, Spectrogram};
use crate::par::Exec;
use crate::{Error, Result};

/// Framing parameters. Defaults are the fullband analysis grid:
/// 1536-point frames every 480 samples at 48 kHz (769 bins, 31.25 Hz apart).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::fullband()
    }
}

impl StftConfig {
    pub const fn fullband() -> Self {
        Self {
            fft_size: 1536,
            hop: 480,
            sample_rate: 48_000,
        }
    }

    /// The 16 kHz grid whose 257 bins coincide with the fullband wideband bins.
    pub const fn wideband() -> Self {
        Self {
            fft_size: 512,
            hop: 160,
            sample_rate: 16_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fft_size > self.hop && self.hop > 0) {
            return Err(Error::Config(format!(
                "stft requires fft_size > hop > 0 (got {} / {})",
                self.fft_size, self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("stft sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn bin_spacing(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }

    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Length of the zero-padded analysis buffer for `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_size
        }
    }
}

/// Periodic square-root Hann window, `sin(pi n / N)`.
fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Lower bound on the overlap-add normalisation. Modified spectrograms are
/// generally inconsistent, and dividing by the near-zero window tails at the
/// signal edges would blow that inconsistency up by orders of magnitude.
pub const WOLA_FLOOR: f64 = 0.5;

/// Planned analysis/synthesis pair for one [`StftConfig`].
///
/// Analysis frames start at `k * hop` with no centering; the input is
/// right-padded with zeros. Synthesis is weighted overlap-add divided by the
/// summed squared window. The divisor is floored at [`WOLA_FLOOR`] so the
/// first and last few hundred samples, covered only by window tails, are
/// faded rather than amplified; reconstruction is exact wherever the summed
/// squared window reaches the floor, which includes everything past the
/// first frame.
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    exec: Exec,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: sqrt_hann(cfg.fft_size),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, audio: &AudioBuffer) -> Result<ComplexSpectrogram> {
        audio.expect_rate(self.cfg.sample_rate)?;
        if audio.is_empty() {
            return Err(Error::InvalidInput("stft of an empty buffer".into()));
        }
        let n = self.cfg.fft_size;
        let bins = self.cfg.bins();
        let frames = self.cfg.frame_count(audio.len());
        let x = audio.samples();
        let rows = self.exec.map_range(frames, |t| {
            let start = t * self.cfg.hop;
            let mut buf: Vec<Complex64> = (0..n)
                .map(|i| {
                    let s = x.get(start + i).copied().unwrap_or(0.0);
                    Complex64::new(s * self.window[i], 0.0)
                })
                .collect();
            self.forward.process(&mut buf);
            buf.truncate(bins);
            buf
        });
        Spectrogram::from_vec(frames, bins, rows.concat())
    }

    /// Output length is the padded analysis length; callers truncate.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        let bins = self.cfg.bins();
        if spec.bins() != bins {
            return Err(Error::Shape(format!(
                "istft expects {bins} bins, got {}",
                spec.bins()
            )));
        }
        let frames = spec.frames();
        let len = self.cfg.padded_len(frames);
        let scale = 1.0 / n as f64;
        let segments = self.exec.map_range(frames, |t| {
            let half = spec.frame(t);
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            buf[..bins].copy_from_slice(half);
            for k in 1..(n - bins + 1) {
                buf[n - k] = half[k].conj();
            }
            self.inverse.process(&mut buf);
            buf.iter()
                .zip(&self.window)
                .map(|(c, w)| c.re * scale * w)
                .collect::<Vec<f64>>()
        });
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for (t, seg) in segments.iter().enumerate() {
            let start = t * hop;
            for i in 0..n {
                out[start + i] += seg[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            *o /= w.max(WOLA_FLOOR);
        }
        AudioBuffer::new(out, self.cfg.sample_rate)
    }
}

pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(*cfg)?.analyze(audio)
}

pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<AudioBuffer> {
    Stft::new(*cfg)?.synthesize(spec)
}
