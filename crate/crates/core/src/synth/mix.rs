use crate::dsp::AudioBuffer;
use crate::{Error, Result};

/// Frames quieter than this (dBFS, per 20 ms frame) are excluded from the
/// speech power.
pub const ACTIVITY_THRESHOLD_DBFS: f64 = -50.0;
pub const ACTIVITY_FRAME_SECS: f64 = 0.02;

/// Mean power over 20 ms frames whose level exceeds -50 dBFS. Falls back to
/// the whole-signal power when no frame is active.
pub fn active_power(audio: &AudioBuffer) -> Result<f64> {
    let x = audio.samples();
    if x.is_empty() || x.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("speech is silent".into()));
    }
    let frame = ((audio.sample_rate() as f64 * ACTIVITY_FRAME_SECS).round() as usize).max(1);
    let mut energy = 0.0;
    let mut count = 0usize;
    for chunk in x.chunks(frame) {
        let e: f64 = chunk.iter().map(|v| v * v).sum();
        let level = 10.0 * (e / chunk.len() as f64).log10();
        if level > ACTIVITY_THRESHOLD_DBFS {
            energy += e;
            count += chunk.len();
        }
    }
    if count == 0 {
        return Ok(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64);
    }
    Ok(energy / count as f64)
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Loops or crops `noise` to `len` samples, starting at its first sample.
pub fn fit_noise(noise: &AudioBuffer, len: usize) -> Result<Vec<f64>> {
    let n = noise.samples();
    if n.is_empty() {
        return Err(Error::InvalidInput("noise is empty".into()));
    }
    Ok(n.iter().copied().cycle().take(len).collect())
}

/// SNR in dB between speech (active-frame power) and noise (mean power).
pub fn measured_snr(speech: &AudioBuffer, noise: &[f64]) -> Result<f64> {
    let pn = mean_power(noise);
    if pn == 0.0 {
        return Err(Error::InvalidInput("noise is silent".into()));
    }
    Ok(10.0 * (active_power(speech)? / pn).log10())
}

/// Scales `noise` (looped or cropped to the speech length) so that the
/// speech-to-noise ratio is `snr_db`, and adds it. Returns the mixture and
/// the scaled noise.
pub fn mix_at_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<(AudioBuffer, AudioBuffer)> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::SampleRate { expected: speech.sample_rate(), actual: noise.sample_rate() });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("SNR {snr_db} dB")));
    }
    let ps = active_power(speech)?;
    let n = fit_noise(noise, speech.len())?;
    let pn = mean_power(&n);
    if pn == 0.0 {
        return Err(Error::InvalidInput("noise is silent".into()));
    }
    let gain = noise_gain(ps, pn, snr_db);
    let scaled: Vec<f64> = n.iter().map(|v| v * gain).collect();
    let noisy: Vec<f64> = speech.samples().iter().zip(&scaled).map(|(s, v)| s + v).collect();
    let rate = speech.sample_rate();
    Ok((AudioBuffer::new(noisy, rate)?, AudioBuffer::new(scaled, rate)?))
}

/// Amplitude gain taking noise power `pn` to `ps / 10^(snr/10)`.
pub fn noise_gain(ps: f64, pn: f64, snr_db: f64) -> f64 {
    (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt()
}
