//! WAV ingestion and emission: mono PCM 16-bit or IEEE float 32-bit at
//! 16 kHz or 48 kHz.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::{Error, Result};

const ACCEPTED_RATES: [u32; 2] = [16_000, 48_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if !ACCEPTED_RATES.contains(&spec.sample_rate) {
        return Err(Error::Format(format!(
            "{}: unsupported sample rate {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample layout {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    }
    .map_err(|e| map_hound(path, e))?;
    AudioBuffer::new(samples, spec.sample_rate)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if !ACCEPTED_RATES.contains(&audio.sample_rate()) {
        return Err(Error::Format(format!(
            "cannot write {} Hz audio",
            audio.sample_rate()
        )));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in audio.samples() {
        let res = match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavEncoding::Float32 => writer.write_sample(s as f32),
        };
        res.map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = AudioBuffer::new(vec![0.1, -0.5, 0.25, 0.0], 48_000).unwrap();
        write_wav(&p, &x, WavEncoding::Float32).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.sample_rate(), 48_000);
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let x = AudioBuffer::new(vec![0.5, -0.5, 0.0], 16_000).unwrap();
        write_wav(&p, &x, WavEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&p).unwrap().samples(), &[0.5, -0.5, 0.0]);
    }

    #[test]
    fn rejects_other_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = WavSpec { channels: 2, sample_rate: 48_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::Format(_))));

        let odd = dir.path().join("r.wav");
        let spec = WavSpec { channels: 1, sample_rate: 44_100, bits_per_sample: 16, sample_format: SampleFormat::Int };
        WavWriter::create(&odd, spec).unwrap().finalize().unwrap();
        assert!(matches!(read_wav(&odd), Err(Error::Format(_))));

        let pcm24 = dir.path().join("p.wav");
        let spec = WavSpec { channels: 1, sample_rate: 48_000, bits_per_sample: 24, sample_format: SampleFormat::Int };
        WavWriter::create(&pcm24, spec).unwrap().finalize().unwrap();
        assert!(matches!(read_wav(&pcm24), Err(Error::Format(_))));

        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
