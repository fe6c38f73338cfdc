use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::AudioBuffer;
use crate::Result;

pub const MAX_SECTIONS: usize = 3;
pub const MAX_GAIN_DB: f64 = 6.0;
pub const CENTER_RANGE_HZ: (f64, f64) = (100.0, 20_000.0);
pub const Q_RANGE: (f64, f64) = (0.5, 2.0);

/// One peaking section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqSection {
    pub center_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

/// Normalized biquad coefficients (a0 = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// RBJ peaking equalizer.
    pub fn peaking(section: &EqSection, sample_rate: u32) -> Self {
        let amp = 10f64.powf(section.gain_db / 40.0);
        let w0 = 2.0 * PI * section.center_hz / sample_rate as f64;
        let alpha = w0.sin() / (2.0 * section.q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha / amp;
        Biquad {
            b: [(1.0 + alpha * amp) / a0, -2.0 * cos / a0, (1.0 - alpha * amp) / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha / amp) / a0],
        }
    }

    /// Both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        let [a1, a2] = self.a;
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }

    pub fn magnitude(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate as f64;
        let z1 = num_complex::Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        (num / den).norm()
    }

    fn run(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + s1;
            s1 = self.b[1] * *v - self.a[0] * y + s2;
            s2 = self.b[2] * *v - self.a[1] * y;
            *v = y;
        }
    }
}

/// Cascade of peaking sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EqFilter {
    pub sections: Vec<EqSection>,
}

impl EqFilter {
    pub fn biquads(&self, sample_rate: u32) -> Vec<Biquad> {
        self.sections.iter().map(|s| Biquad::peaking(&Self::clamped(s, sample_rate), sample_rate)).collect()
    }

    // Centres above 0.45 fs are pulled below Nyquist so lower-rate audio
    // still gets a valid design.
    fn clamped(s: &EqSection, sample_rate: u32) -> EqSection {
        EqSection { center_hz: s.center_hz.min(0.45 * sample_rate as f64), ..*s }
    }

    /// Magnitude response of the whole cascade, in dB.
    pub fn response_db(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        self.biquads(sample_rate).iter().map(|b| 20.0 * b.magnitude(freq_hz, sample_rate).log10()).sum()
    }
}

/// Up to three sections with gains in ±6 dB, log-uniform centres in
/// [100, 20000] Hz and Q in [0.5, 2]. Deterministic in `seed`.
pub fn random_eq(seed: u64) -> EqFilter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=MAX_SECTIONS);
    let (lo, hi) = (CENTER_RANGE_HZ.0.ln(), CENTER_RANGE_HZ.1.ln());
    let sections = (0..n)
        .map(|_| EqSection {
            center_hz: rng.gen_range(lo..hi).exp(),
            gain_db: rng.gen_range(-MAX_GAIN_DB..=MAX_GAIN_DB),
            q: rng.gen_range(Q_RANGE.0..=Q_RANGE.1),
        })
        .collect();
    EqFilter { sections }
}

pub fn apply_eq(audio: &AudioBuffer, eq: &EqFilter) -> Result<AudioBuffer> {
    let mut x = audio.samples().to_vec();
    for bq in eq.biquads(audio.sample_rate()) {
        bq.run(&mut x);
    }
    AudioBuffer::new(x, audio.sample_rate())
}
