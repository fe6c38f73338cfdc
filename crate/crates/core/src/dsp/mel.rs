use super::{MagnitudeSpectrogram, Mask, Spectrogram};
use crate::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank over the linear STFT bins.
///
/// Filter centres are spaced uniformly on the mel scale with the first
/// centre at 0 Hz and the last at Nyquist; each triangle rises from the
/// previous centre and falls to the next, peaking at 1. The outermost
/// filters are half-triangles, so every linear bin from 0 Hz to Nyquist
/// carries positive weight in at least one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    bins: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32) -> Result<Self> {
        if n_mels < 2 {
            return Err(Error::Config(format!("n_mels must be at least 2, got {n_mels}")));
        }
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let centers_hz: Vec<f64> = (0..n_mels)
            .map(|m| mel_to_hz(top * m as f64 / (n_mels - 1) as f64))
            .collect();
        let spacing = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let c = centers_hz[m];
            for f in 0..bins {
                let hz = f as f64 * spacing;
                let w = if hz <= c {
                    if m == 0 {
                        if hz == c { 1.0 } else { 0.0 }
                    } else {
                        let l = centers_hz[m - 1];
                        ((hz - l) / (c - l)).max(0.0)
                    }
                } else if m + 1 < n_mels {
                    let r = centers_hz[m + 1];
                    ((r - hz) / (r - c)).max(0.0)
                } else {
                    0.0
                };
                weights[m * bins + f] = w;
            }
        }
        let fb = Self {
            n_mels,
            bins,
            weights,
            centers_hz,
        };
        if let Some(f) = (0..bins).find(|&f| fb.column_sum(f) <= 0.0) {
            return Err(Error::Config(format!(
                "mel filterbank leaves linear bin {f} uncovered"
            )));
        }
        Ok(fb)
    }

    /// Filterbank on the default fullband grid (769 bins, 48 kHz).
    pub fn fullband(n_mels: usize) -> Result<Self> {
        Self::new(n_mels, 1536, 48_000)
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    pub fn weight(&self, m: usize, f: usize) -> f64 {
        self.weights[m * self.bins + f]
    }

    pub fn column_sum(&self, f: usize) -> f64 {
        (0..self.n_mels).map(|m| self.weight(m, f)).sum()
    }

    /// Projects one linear-frequency frame onto the mel bands.
    pub fn project_frame(&self, frame: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(frame).map(|(w, x)| w * x).sum();
        }
    }
}

/// `out(t, m) = sum_f weights(m, f) * mag(t, f)`.
pub fn mel_project(mag: &MagnitudeSpectrogram, fb: &MelFilterbank) -> Result<MagnitudeSpectrogram> {
    if mag.bins() != fb.bins {
        return Err(Error::Shape(format!(
            "mel_project expects {} bins, got {}",
            fb.bins,
            mag.bins()
        )));
    }
    let mut out = Spectrogram::zeros(mag.frames(), fb.n_mels);
    for t in 0..mag.frames() {
        fb.project_frame(mag.frame(t), out.frame_mut(t));
    }
    Ok(out)
}

/// Expands a mel-domain mask to linear bins by weight-normalised
/// interpolation: `M(f) = sum_m w(m,f) mel(m) / sum_m w(m,f)`.
pub fn mel_mask_to_linear(mel_mask: &Mask, fb: &MelFilterbank) -> Result<Mask> {
    if mel_mask.bins() != fb.n_mels {
        return Err(Error::Shape(format!(
            "mel mask has {} bands, filterbank has {}",
            mel_mask.bins(),
            fb.n_mels
        )));
    }
    let norms: Vec<f64> = (0..fb.bins).map(|f| fb.column_sum(f)).collect();
    if norms.iter().any(|&n| n <= 0.0) {
        return Err(Error::Shape("filterbank has an empty column".into()));
    }
    let mut out = Spectrogram::zeros(mel_mask.frames(), fb.bins);
    for t in 0..mel_mask.frames() {
        let mm = mel_mask.frame(t);
        let row = out.frame_mut(t);
        for m in 0..fb.n_mels {
            let g = mm[m];
            if g == 0.0 {
                continue;
            }
            for (f, r) in row.iter_mut().enumerate() {
                *r += fb.weight(m, f) * g;
            }
        }
        for (r, n) in row.iter_mut().zip(&norms) {
            *r /= n;
        }
    }
    Ok(out)
}
