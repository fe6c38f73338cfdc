use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

/// Dataset partition of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Where a record's impulse response comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum RirSource {
    /// Anechoic: no convolution.
    None,
    File(PathBuf),
    /// Exponential-decay noise model, written `sim:<t60>:<seed>`.
    Simulated { t60: f64, seed: u64 },
}

impl fmt::Display for RirSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RirSource::None => f.write_str("-"),
            RirSource::File(p) => write!(f, "{}", p.display()),
            RirSource::Simulated { t60, seed } => write!(f, "sim:{t60}:{seed}"),
        }
    }
}

impl FromStr for RirSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "-" {
            return Ok(RirSource::None);
        }
        if let Some(rest) = s.strip_prefix("sim:") {
            let (t60, seed) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad simulated rir {s:?}")))?;
            let t60 = t60.parse().map_err(|_| Error::Config(format!("bad T60 in {s:?}")))?;
            let seed = seed.parse().map_err(|_| Error::Config(format!("bad seed in {s:?}")))?;
            return Ok(RirSource::Simulated { t60, seed });
        }
        Ok(RirSource::File(PathBuf::from(s)))
    }
}

pub const SNR_RANGE_DB: (f64, f64) = (-5.0, 30.0);
pub const DEFAULT_EARLY_MS: f64 = 75.0;

/// Everything needed to regenerate one noisy/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub speech: PathBuf,
    pub noise: PathBuf,
    pub rir: RirSource,
    pub snr_db: f64,
    pub eq_seed: Option<u64>,
    pub split: Split,
    pub early_ms: f64,
}

impl MixtureSpec {
    pub fn new(speech: impl Into<PathBuf>, noise: impl Into<PathBuf>, snr_db: f64) -> Self {
        MixtureSpec {
            speech: speech.into(),
            noise: noise.into(),
            rir: RirSource::None,
            snr_db,
            eq_seed: None,
            split: Split::Train,
            early_ms: DEFAULT_EARLY_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = SNR_RANGE_DB;
        if !(lo..=hi).contains(&self.snr_db) {
            return Err(Error::Config(format!("SNR {} dB outside [{lo}, {hi}]", self.snr_db)));
        }
        if !(self.early_ms >= 0.0 && self.early_ms.is_finite()) {
            return Err(Error::Config(format!("early reflection window {} ms", self.early_ms)));
        }
        Ok(())
    }
}

/// A manifest line: the mixture recipe plus, after synthesis, the paths of
/// the generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub spec: MixtureSpec,
    pub noisy: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

/// Tab-separated records, one per line, with columns
/// `speech noise rir snr_db eq_seed split [noisy target]`. `-` marks an
/// absent rir or eq seed. Lines starting with `#` and blank lines are
/// ignored. Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: &str = "# speech\tnoise\trir\tsnr_db\teq_seed\tsplit\tnoisy\ttarget";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("manifest line {}: {what}", i + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 && cols.len() != 8 {
                return Err(bad(&format!("expected 6 or 8 fields, got {}", cols.len())));
            }
            let snr_db: f64 = cols[3].parse().map_err(|_| bad("bad snr_db"))?;
            let eq_seed = match cols[4] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad("bad eq_seed"))?),
            };
            let spec = MixtureSpec {
                speech: cols[0].into(),
                noise: cols[1].into(),
                rir: cols[2].parse()?,
                snr_db,
                eq_seed,
                split: cols[5].parse()?,
                early_ms: DEFAULT_EARLY_MS,
            };
            spec.validate().map_err(|e| bad(&e.to_string()))?;
            let (noisy, target) = match cols.len() {
                8 => (Some(cols[6].into()), Some(cols[7].into())),
                _ => (None, None),
            };
            records.push(ManifestRecord { spec, noisy, target });
        }
        Ok(Manifest { base_dir, records })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The record's spec with all paths resolved.
    pub fn resolved_spec(&self, record: &ManifestRecord) -> MixtureSpec {
        let mut spec = record.spec.clone();
        spec.speech = self.resolve(&spec.speech);
        spec.noise = self.resolve(&spec.noise);
        if let RirSource::File(p) = &spec.rir {
            spec.rir = RirSource::File(self.resolve(p));
        }
        spec
    }

    /// Resolved (noisy, target) paths of synthesized records in `split`.
    pub fn pairs(&self, split: Split) -> Result<Vec<(PathBuf, PathBuf)>> {
        self.records
            .iter()
            .filter(|r| r.spec.split == split)
            .map(|r| match (&r.noisy, &r.target) {
                (Some(n), Some(t)) => Ok((self.resolve(n), self.resolve(t))),
                _ => Err(Error::Config("manifest record has no noisy/target paths; run synthesis first".into())),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let s = &r.spec;
            let eq = s.eq_seed.map_or("-".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.speech.display(),
                s.noise.display(),
                s.rir,
                s.snr_db,
                eq,
                s.split
            ));
            if let (Some(n), Some(t)) = (&r.noisy, &r.target) {
                out.push_str(&format!("\t{}\t{}", n.display(), t.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
