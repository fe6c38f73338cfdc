use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::dsp::AudioBuffer;
use crate::{Error, Result};

/// Length of the early-reflection window kept in training targets.
pub const EARLY_REFLECTION_MS: f64 = 75.0;

/// Full linear convolution. Short or sparse kernels use the direct sum
/// (exact for impulse-like responses), dense ones an FFT of the padded
/// signals.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let taps = h.iter().filter(|v| **v != 0.0).count();
    if taps <= 64 || x.len() <= 64 {
        let mut y = vec![0.0; out_len];
        for (k, &hk) in h.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            for (n, &xn) in x.iter().enumerate() {
                y[n + k] += hk * xn;
            }
        }
        return y;
    }
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b = vec![Complex64::new(0.0, 0.0); size];
        b.iter_mut().zip(v).for_each(|(c, &r)| c.re = r);
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Index of the largest-magnitude tap.
pub fn peak_index(rir: &[f64]) -> usize {
    rir.iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0
}

fn check_rir(rir: &[f64]) -> Result<()> {
    if rir.is_empty() {
        return Err(Error::InvalidInput("empty impulse response".into()));
    }
    if rir.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("impulse response".into()));
    }
    Ok(())
}

fn aligned(speech: &AudioBuffer, rir: &[f64], peak: usize) -> Result<AudioBuffer> {
    let full = convolve(speech.samples(), rir);
    let out: Vec<f64> = (0..speech.len()).map(|n| full.get(n + peak).copied().unwrap_or(0.0)).collect();
    AudioBuffer::new(out, speech.sample_rate())
}

/// Reverberant speech: `speech * rir`, shifted so the RIR peak (direct
/// path) lands at lag zero, truncated to the speech length.
pub fn apply_rir(speech: &AudioBuffer, rir: &[f64]) -> Result<AudioBuffer> {
    check_rir(rir)?;
    aligned(speech, rir, peak_index(rir))
}

/// Like [`apply_rir`] with the RIR cut to `[peak, peak + early_ms]`.
pub fn early_reflection_target(speech: &AudioBuffer, rir: &[f64], early_ms: f64) -> Result<AudioBuffer> {
    check_rir(rir)?;
    let peak = peak_index(rir);
    let span = (early_ms * 1e-3 * speech.sample_rate() as f64).round() as usize;
    let end = (peak + span + 1).min(rir.len());
    let mut early = vec![0.0; end];
    early[peak..end].copy_from_slice(&rir[peak..end]);
    aligned(speech, &early, peak)
}

/// Scales an RIR so its largest-magnitude tap is 1 in absolute value.
pub fn normalize_peak(rir: &mut [f64]) -> Result<()> {
    check_rir(rir)?;
    let p = rir[peak_index(rir)].abs();
    if p == 0.0 {
        return Err(Error::InvalidInput("impulse response is all zeros".into()));
    }
    rir.iter_mut().for_each(|v| *v /= p);
    Ok(())
}

/// Exponential-decay noise RIR: unit direct path followed by white noise
/// under `exp(-t / tau)` with `tau = t60 / (3 ln 10)` (60 dB amplitude
/// decay over `t60`). Length `t60` seconds.
pub fn simulate_rir(t60: f64, seed: u64, sample_rate: u32) -> Result<Vec<f64>> {
    if !(0.05..=5.0).contains(&t60) {
        return Err(Error::InvalidInput(format!("T60 {t60} s outside [0.05, 5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (t60 * sample_rate as f64).round() as usize;
    let tau = t60 / (3.0 * std::f64::consts::LN_10);
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sample_rate as f64;
            0.5 * rng.gen_range(-1.0..1.0) * (-t / tau).exp()
        })
        .collect();
    h[0] = 1.0;
    Ok(h)
}
