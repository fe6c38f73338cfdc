//! Objective metrics: SiSNR, SDR, band-limited scoring and per-bin SNR.

use std::fmt;

use crate::dsp::{stft, AudioBuffer, Band, Stft, StftConfig, FULLBAND_RATE};
use crate::par::Exec;
use crate::{Error, Result};

/// Reported scores are clamped to `[-METRIC_CAP_DB, METRIC_CAP_DB]`.
pub const METRIC_CAP_DB: f64 = 100.0;
pub const METRIC_EPS: f64 = 1e-12;

fn db_ratio(num: f64, den: f64) -> f64 {
    (10.0 * (num / (den + METRIC_EPS)).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty signal".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR in dB. Both signals are made zero-mean; the
/// estimate is projected onto the reference and the ratio of projected
/// energy to residual energy (plus [`METRIC_EPS`]) is taken.
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    same_len(reference, estimate)?;
    let n = reference.len() as f64;
    let mr = reference.iter().sum::<f64>() / n;
    let me = estimate.iter().sum::<f64>() / n;
    let r: Vec<f64> = reference.iter().map(|x| x - mr).collect();
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::InvalidInput("reference is zero after mean removal".into()));
    }
    // Rescale the estimate to the reference energy so the fixed epsilon
    // below cannot break scale invariance.
    let mut e: Vec<f64> = estimate.iter().map(|x| x - me).collect();
    let ee = dot(&e, &e);
    if ee > 0.0 {
        let k = (rr / ee).sqrt();
        e.iter_mut().for_each(|x| *x *= k);
    }
    let alpha = dot(&e, &r) / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = e.iter().zip(&r).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    Ok(db_ratio(target, noise))
}

/// Plain signal-to-distortion ratio in dB (not scale invariant).
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    same_len(reference, estimate)?;
    let err: f64 = reference.iter().zip(estimate).map(|(r, e)| (r - e).powi(2)).sum();
    Ok(db_ratio(dot(reference, reference), err))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalBand {
    Wideband,
    Highband,
    Fullband,
}

impl EvalBand {
    pub const ALL: [EvalBand; 3] = [EvalBand::Wideband, EvalBand::Highband, EvalBand::Fullband];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalBand::Wideband => "wideband",
            EvalBand::Highband => "highband",
            EvalBand::Fullband => "fullband",
        }
    }
}

impl fmt::Display for EvalBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub si_snr: f64,
    pub sdr: f64,
}

/// SiSNR and SDR for the wideband (0-8 kHz), highband (8-24 kHz) and
/// fullband signals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub wideband: Scores,
    pub highband: Scores,
    pub fullband: Scores,
}

impl MetricReport {
    pub fn band(&self, band: EvalBand) -> Scores {
        match band {
            EvalBand::Wideband => self.wideband,
            EvalBand::Highband => self.highband,
            EvalBand::Fullband => self.fullband,
        }
    }

    /// `(band, metric name, value)` for all six entries.
    pub fn entries(&self) -> Vec<(EvalBand, &'static str, f64)> {
        EvalBand::ALL
            .iter()
            .flat_map(|&b| {
                let s = self.band(b);
                [(b, "sisnr", s.si_snr), (b, "sdr", s.sdr)]
            })
            .collect()
    }

    /// Element-wise mean over reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::InvalidInput("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            wideband: Scores { si_snr: avg(&|r| r.wideband.si_snr), sdr: avg(&|r| r.wideband.sdr) },
            highband: Scores { si_snr: avg(&|r| r.highband.si_snr), sdr: avg(&|r| r.highband.sdr) },
            fullband: Scores { si_snr: avg(&|r| r.fullband.si_snr), sdr: avg(&|r| r.fullband.sdr) },
        })
    }
}

fn scores(reference: &[f64], estimate: &[f64]) -> Result<Scores> {
    Ok(Scores { si_snr: si_snr(reference, estimate)?, sdr: sdr(reference, estimate)? })
}

/// Splits both signals with the STFT brickwall and scores each band.
pub fn band_limited_eval(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<MetricReport> {
    reference.expect_rate(FULLBAND_RATE)?;
    estimate.expect_rate(FULLBAND_RATE)?;
    same_len(reference.samples(), estimate.samples())?;
    let stft = Stft::new(StftConfig::fullband())?;
    let limit = |a: &AudioBuffer, b| crate::dsp::bandlimit_with(&stft, a, b);
    let (rl, el) = (limit(reference, Band::Low)?, limit(estimate, Band::Low)?);
    let (rh, eh) = (limit(reference, Band::High)?, limit(estimate, Band::High)?);
    Ok(MetricReport {
        wideband: scores(rl.samples(), el.samples())?,
        highband: scores(rh.samples(), eh.samples())?,
        fullband: scores(reference.samples(), estimate.samples())?,
    })
}

/// Per-bin SNR statistics over a set of files.
#[derive(Debug, Clone, PartialEq)]
pub struct FsnrReport {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub files: usize,
    /// Bin spacing in Hz.
    pub bin_hz: f64,
}

impl FsnrReport {
    /// Mean of the per-bin means over `bins`.
    pub fn band_mean(&self, bins: std::ops::Range<usize>) -> f64 {
        let n = bins.len() as f64;
        self.mean[bins].iter().sum::<f64>() / n
    }

    pub fn max_ci_width(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).fold(0.0, f64::max)
    }
}

/// Per-file per-bin `10 log10(Σ_t |S|² / (Σ_t |N|² + ε))`.
pub fn fsnr_curve(clean: &AudioBuffer, noise: &AudioBuffer, cfg: &StftConfig) -> Result<Vec<f64>> {
    if clean.len() != noise.len() || clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Shape(format!(
            "clean/noise pair differs: {} samples @ {} Hz vs {} samples @ {} Hz",
            clean.len(),
            clean.sample_rate(),
            noise.len(),
            noise.sample_rate()
        )));
    }
    clean.expect_rate(cfg.sample_rate)?;
    let s = stft(clean, cfg)?;
    let n = stft(noise, cfg)?;
    let mut ps = vec![0.0; cfg.bins()];
    let mut pn = vec![0.0; cfg.bins()];
    for t in 0..s.frames() {
        for (f, (a, b)) in s.frame(t).iter().zip(n.frame(t)).enumerate() {
            ps[f] += a.norm_sqr();
            pn[f] += b.norm_sqr();
        }
    }
    Ok(ps.iter().zip(&pn).map(|(s, n)| 10.0 * ((s + METRIC_EPS) / (n + METRIC_EPS)).log10()).collect())
}

/// Mean fSNR with a normal-approximation 95% interval across files.
pub fn fsnr(clean: &[AudioBuffer], noise: &[AudioBuffer], cfg: &StftConfig, exec: Exec) -> Result<FsnrReport> {
    if clean.is_empty() {
        return Err(Error::InvalidInput("fSNR needs at least one file".into()));
    }
    if clean.len() != noise.len() {
        return Err(Error::InvalidInput(format!(
            "{} clean files but {} noise files",
            clean.len(),
            noise.len()
        )));
    }
    let pairs: Vec<(&AudioBuffer, &AudioBuffer)> = clean.iter().zip(noise).collect();
    let curves = exec.try_map(&pairs, |(c, n)| fsnr_curve(c, n, cfg))?;
    let files = curves.len();
    let nf = files as f64;
    let bins = cfg.bins();
    let mut mean = vec![0.0; bins];
    let mut lower = vec![0.0; bins];
    let mut upper = vec![0.0; bins];
    for f in 0..bins {
        let m = curves.iter().map(|c| c[f]).sum::<f64>() / nf;
        let sd = if files > 1 {
            (curves.iter().map(|c| (c[f] - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * sd / nf.sqrt();
        mean[f] = m;
        lower[f] = m - half;
        upper[f] = m + half;
    }
    Ok(FsnrReport { mean, lower, upper, files, bin_hz: cfg.bin_spacing() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn hand_values() {
        // zero-mean [1,0] is [0.5,-0.5]; estimate [1,1] is zero-mean [0,0]
        assert!(si_snr(&[1.0, 0.0], &[1.0, 1.0]).unwrap() <= -METRIC_CAP_DB + 1e-9);
        assert!((si_snr(&[1.0, 0.0, -1.0, 0.0], &[1.0, 1.0, -1.0, -1.0]).unwrap()).abs() < 1e-9);
        assert!(sdr(&[1.0, 0.0], &[1.0, 1.0]).unwrap().abs() < 1e-9);
        let s = [0.3, -1.0, 2.0, 0.5];
        let half: Vec<f64> = s.iter().map(|x| 0.5 * x).collect();
        assert!((sdr(&s, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert_eq!(sdr(&s, &s).unwrap(), METRIC_CAP_DB);
        assert_eq!(si_snr(&s, &half).unwrap(), METRIC_CAP_DB);
    }

    #[test]
    fn errors() {
        assert!(matches!(si_snr(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(si_snr(&[2.0, 2.0], &[1.0, 2.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(sdr(&[], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn orthogonal_equal_energy_noise_is_zero_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(8..200);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = s.iter().sum::<f64>() / n as f64;
            let s: Vec<f64> = s.iter().map(|x| x - m).collect();
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mv = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= mv);
            let k = dot(&v, &s) / dot(&s, &s);
            v.iter_mut().zip(&s).for_each(|(x, y)| *x -= k * y);
            let scale = (dot(&s, &s) / dot(&v, &v)).sqrt();
            let est: Vec<f64> = s.iter().zip(&v).map(|(a, b)| a + scale * b).collect();
            assert!(si_snr(&s, &est).unwrap().abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn scale_invariance(
            v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4..64),
            alpha in 0.01f64..100.0,
        ) {
            let r: Vec<f64> = v.iter().map(|p| p.0).collect();
            let e: Vec<f64> = v.iter().map(|p| p.0 + 0.5 * p.1).collect();
            let scaled: Vec<f64> = e.iter().map(|x| alpha * x).collect();
            let a = si_snr(&r, &e).unwrap();
            let b = si_snr(&r, &scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    fn sine(freq: f64, len: usize, amp: f64) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / 48_000.0).sin()).collect(), 48_000)
            .unwrap()
    }

    /// Noise with STFT content only in bins `>= lowest_bin`. The brickwall
    /// leaks through window sidelobes, so keep a guard band above bin 256.
    /// Directly at the boundary the wideband score drops to about 40 dB.
    pub(crate) fn highband_noise(rng: &mut ChaCha8Rng, len: usize, lowest_bin: usize) -> AudioBuffer {
        let stft = Stft::new(StftConfig::fullband()).unwrap();
        let raw = AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), 48_000).unwrap();
        let mut spec = stft.analyze(&raw).unwrap();
        let frames = spec.frames();
        let zero = num_complex::Complex64::new(0.0, 0.0);
        for t in 0..frames {
            // silent first/last frames: a finite highband-only signal must fade in and out
            let edge = t < 4 || t + 5 > frames;
            let frame = spec.frame_mut(t);
            if edge {
                frame.fill(zero);
            } else {
                frame[..lowest_bin].fill(zero);
            }
        }
        stft.synthesize(&spec).unwrap().truncated(len)
    }

    #[test]
    fn band_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..24_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = AudioBuffer::new(x, 48_000).unwrap();
        let same = band_limited_eval(&r, &r).unwrap();
        assert!(same.entries().iter().all(|e| e.2 == METRIC_CAP_DB));
        assert_eq!(same.entries().len(), 6);
        let noise = highband_noise(&mut rng, 24_000, 300);
        let est = AudioBuffer::new(r.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect(), 48_000)
            .unwrap();
        let rep = band_limited_eval(&r, &est).unwrap();
        assert!(rep.wideband.si_snr > 95.0, "{rep:?}");
        let edge = highband_noise(&mut rng, 24_000, 257);
        let est = AudioBuffer::new(r.samples().iter().zip(edge.samples()).map(|(a, b)| a + b).collect(), 48_000)
            .unwrap();
        assert!(band_limited_eval(&r, &est).unwrap().wideband.si_snr > 35.0);
        assert!(rep.highband.si_snr.is_finite() && rep.highband.si_snr < 20.0);
        assert!(band_limited_eval(&r, &AudioBuffer::silence(10, 48_000)).is_err());
    }

    #[test]
    fn fsnr_sines() {
        let cfg = StftConfig::fullband();
        let clean = sine(1000.0, 48_000, 1.0);
        let noise = sine(16_000.0, 48_000, 1.0);
        let rep = fsnr(&[clean.clone()], &[noise.clone()], &cfg, Exec::Sequential).unwrap();
        assert_eq!(rep.mean.len(), 769);
        assert!(rep.mean[32] > 40.0 && rep.mean[512] < -40.0);
        assert_eq!(rep.max_ci_width(), 0.0);
        let curve = fsnr_curve(&clean, &noise, &cfg).unwrap();
        assert_eq!(rep.mean, curve);
        let many = fsnr(&vec![clean; 4], &vec![noise; 4], &cfg, Exec::default()).unwrap();
        assert_eq!(many.max_ci_width(), 0.0);
        assert!(fsnr(&[], &[], &cfg, Exec::Sequential).is_err());
    }
}
