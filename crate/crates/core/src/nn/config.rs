use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dsp::{FULLBAND_BINS, HIGHBAND_BINS, WIDEBAND_BINS};
use crate::{Error, Result};

/// Output dimensions a mask head may have: wideband bins, fullband bins, or
/// one of the mel resolutions.
pub const VALID_OUTPUT_DIMS: [usize; 5] = [WIDEBAND_BINS, FULLBAND_BINS, 48, 64, 80];

/// One convolution (or transposed convolution) layer: output channels,
/// kernel `[time, freq]`, stride `[time, freq]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: [usize; 2], stride: [usize; 2]) -> Self {
        Self { channels, kernel, stride }
    }

    /// Frequency size after a valid convolution.
    pub fn conv_out(&self, f: usize) -> Option<usize> {
        (f >= self.kernel[1]).then(|| (f - self.kernel[1]) / self.stride[1] + 1)
    }

    /// Frequency size after a transposed convolution.
    pub fn deconv_out(&self, f: usize) -> usize {
        (f - 1) * self.stride[1] + self.kernel[1]
    }

    fn validate(&self, transpose: bool) -> Result<()> {
        if self.channels == 0 || self.kernel.contains(&0) || self.stride[1] == 0 {
            return Err(Error::Config(format!("degenerate convolution {self}")));
        }
        if self.stride[0] != 1 {
            return Err(Error::Config(format!("time stride must be 1 in {self}")));
        }
        if transpose && self.kernel[0] != 1 {
            return Err(Error::Config(format!("transposed convolution time kernel must be 1 in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}x{}/{}x{}",
            self.channels, self.kernel[0], self.kernel[1], self.stride[0], self.stride[1]
        )
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    /// `channels/kt x kf/st x sf`, e.g. `45/4x3/1x2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad convolution spec {s:?} (want channels/KTxKF/STxSF)"));
        let parts: Vec<&str> = s.trim().split('/').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let pair = |p: &str| -> Result<[usize; 2]> {
            let (a, b) = p.split_once('x').ok_or_else(bad)?;
            Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
        };
        Ok(Self {
            channels: parts[0].trim().parse().map_err(|_| bad())?,
            kernel: pair(parts[1])?,
            stride: pair(parts[2])?,
        })
    }
}

const ENCODER: [ConvSpec; 3] = [
    ConvSpec::new(45, [4, 3], [1, 2]),
    ConvSpec::new(45, [1, 3], [1, 2]),
    ConvSpec::new(45, [1, 3], [1, 2]),
];

fn toy_encoder(ch: usize) -> Vec<ConvSpec> {
    ENCODER.iter().map(|c| ConvSpec { channels: ch, ..*c }).collect()
}

/// Highband CRNN: two input streams (highband magnitudes through 2-D conv
/// groups, wideband magnitudes through a pointwise conv group), two GRUs and
/// a sigmoid dense head over the highband bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnnHighbandConfig {
    pub convs: Vec<ConvSpec>,
    pub pointwise: usize,
    pub gru: Vec<usize>,
    pub dense: usize,
    pub high_bins: usize,
    pub wide_bins: usize,
    pub dropout: f64,
}

impl Default for CrnnHighbandConfig {
    fn default() -> Self {
        Self {
            convs: ENCODER.to_vec(),
            pointwise: 128,
            gru: vec![256, 256],
            dense: HIGHBAND_BINS,
            high_bins: HIGHBAND_BINS,
            wide_bins: WIDEBAND_BINS,
            dropout: 0.25,
        }
    }
}

impl CrnnHighbandConfig {
    /// Reduced widths for quick experiments.
    pub fn toy() -> Self {
        Self {
            convs: toy_encoder(8),
            pointwise: 16,
            gru: vec![32, 32],
            ..Self::default()
        }
    }

    /// Frequency sizes through the upper stream, input first.
    pub fn freq_chain(&self) -> Result<Vec<usize>> {
        conv_chain(self.high_bins, &self.convs)
    }

    /// Width of the recurrent input per frame.
    pub fn recurrent_input(&self) -> Result<usize> {
        let chain = self.freq_chain()?;
        Ok(chain.last().unwrap() * self.convs.last().unwrap().channels + self.pointwise)
    }

    pub fn validate(&self) -> Result<()> {
        self.freq_chain()?;
        if self.dense != self.high_bins {
            return Err(Error::Config(format!(
                "dense units {} must equal the highband bin count {}",
                self.dense, self.high_bins
            )));
        }
        if self.high_bins != HIGHBAND_BINS || self.wide_bins != WIDEBAND_BINS {
            return Err(Error::Config(format!(
                "band sizes must be {HIGHBAND_BINS}/{WIDEBAND_BINS}, got {}/{}",
                self.high_bins, self.wide_bins
            )));
        }
        check_common(self.pointwise, &self.gru, self.dropout)
    }
}

/// Convolutional encoder, GRUs, transposed-convolution decoder, dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoderConfig {
    pub input_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub gru: Vec<usize>,
    /// Channels of the 2-D map the last GRU output is folded into before
    /// the decoder; its frequency size is `units / bridge_channels`.
    pub bridge_channels: usize,
    pub deconvs: Vec<ConvSpec>,
    pub output_dim: usize,
    pub dropout: f64,
}

impl EncoderDecoderConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            input_dim: dim,
            convs: ENCODER.to_vec(),
            gru: vec![256, 256],
            bridge_channels: 8,
            deconvs: vec![ConvSpec::new(8, [1, 5], [1, 2]), ConvSpec::new(1, [1, 3], [1, 1])],
            output_dim: dim,
            dropout: 0.25,
        }
    }

    /// The wideband first-step network.
    pub fn wideband() -> Self {
        Self::new(WIDEBAND_BINS)
    }

    pub fn toy(dim: usize) -> Self {
        Self {
            convs: toy_encoder(8),
            gru: vec![32, 32],
            ..Self::new(dim)
        }
    }

    pub fn encoder_chain(&self) -> Result<Vec<usize>> {
        conv_chain(self.input_dim, &self.convs)
    }

    pub fn decoder_chain(&self) -> Result<Vec<usize>> {
        let units = *self.gru.last().ok_or_else(|| Error::Config("no recurrent layers".into()))?;
        if self.bridge_channels == 0 || units % self.bridge_channels != 0 {
            return Err(Error::Config(format!(
                "recurrent width {units} is not divisible by {} bridge channels",
                self.bridge_channels
            )));
        }
        let mut f = vec![units / self.bridge_channels];
        for d in &self.deconvs {
            f.push(d.deconv_out(*f.last().unwrap()));
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        check_output_dim(self.output_dim)?;
        self.encoder_chain()?;
        self.decoder_chain()?;
        for d in &self.deconvs {
            d.validate(true)?;
        }
        check_common(1, &self.gru, self.dropout)
    }
}

/// Dense projection, stacked LSTMs, dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstmConfig {
    pub input_dim: usize,
    pub projection: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub dropout: f64,
}

impl StackedLstmConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            input_dim: dim,
            projection: 256,
            hidden: vec![256; 3],
            output_dim: dim,
            dropout: 0.25,
        }
    }

    pub fn wideband() -> Self {
        Self::new(WIDEBAND_BINS)
    }

    pub fn toy(dim: usize) -> Self {
        Self {
            projection: 32,
            hidden: vec![32; 3],
            ..Self::new(dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_output_dim(self.output_dim)?;
        if self.hidden.len() != 3 {
            return Err(Error::Config(format!("expected 3 LSTM layers, got {}", self.hidden.len())));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension 0".into()));
        }
        check_common(self.projection, &self.hidden, self.dropout)
    }
}

fn conv_chain(input: usize, convs: &[ConvSpec]) -> Result<Vec<usize>> {
    if convs.is_empty() {
        return Err(Error::Config("no convolution layers".into()));
    }
    let mut f = vec![input];
    for c in convs {
        c.validate(false)?;
        let next = c
            .conv_out(*f.last().unwrap())
            .ok_or_else(|| Error::Config(format!("frequency size {} too small for {c}", f.last().unwrap())))?;
        f.push(next);
    }
    Ok(f)
}

fn check_output_dim(d: usize) -> Result<()> {
    if !VALID_OUTPUT_DIMS.contains(&d) {
        return Err(Error::Config(format!("output dimension {d} not one of {VALID_OUTPUT_DIMS:?}")));
    }
    Ok(())
}

fn check_common(width: usize, recurrent: &[usize], dropout: f64) -> Result<()> {
    if width == 0 || recurrent.is_empty() || recurrent.contains(&0) {
        return Err(Error::Config("zero-width layer".into()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
    }
    Ok(())
}

// ---- key/value echo used by checkpoint headers --------------------------

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad value {s:?} for {key}"))))
        .collect()
}

fn convs(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',').map(ConvSpec::from_str).collect()
}

pub(crate) struct Fields<'a>(pub &'a BTreeMap<String, String>);

impl Fields<'_> {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        split(self.raw(key)?, key)
    }

    fn convs(&self, key: &str) -> Result<Vec<ConvSpec>> {
        convs(self.raw(key)?)
    }
}

impl CrnnHighbandConfig {
    pub(crate) fn to_fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("convs", join(&self.convs)),
            ("pointwise", self.pointwise.to_string()),
            ("gru", join(&self.gru)),
            ("dense", self.dense.to_string()),
            ("high_bins", self.high_bins.to_string()),
            ("wide_bins", self.wide_bins.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    pub(crate) fn from_fields(f: &Fields) -> Result<Self> {
        Ok(Self {
            convs: f.convs("convs")?,
            pointwise: f.num("pointwise")?,
            gru: f.list("gru")?,
            dense: f.num("dense")?,
            high_bins: f.num("high_bins")?,
            wide_bins: f.num("wide_bins")?,
            dropout: f.num("dropout")?,
        })
    }
}

impl EncoderDecoderConfig {
    pub(crate) fn to_fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("convs", join(&self.convs)),
            ("gru", join(&self.gru)),
            ("bridge_channels", self.bridge_channels.to_string()),
            ("deconvs", join(&self.deconvs)),
            ("output_dim", self.output_dim.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    pub(crate) fn from_fields(f: &Fields) -> Result<Self> {
        Ok(Self {
            input_dim: f.num("input_dim")?,
            convs: f.convs("convs")?,
            gru: f.list("gru")?,
            bridge_channels: f.num("bridge_channels")?,
            deconvs: f.convs("deconvs")?,
            output_dim: f.num("output_dim")?,
            dropout: f.num("dropout")?,
        })
    }
}

impl StackedLstmConfig {
    pub(crate) fn to_fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("projection", self.projection.to_string()),
            ("hidden", join(&self.hidden)),
            ("output_dim", self.output_dim.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    pub(crate) fn from_fields(f: &Fields) -> Result<Self> {
        Ok(Self {
            input_dim: f.num("input_dim")?,
            projection: f.num("projection")?,
            hidden: f.list("hidden")?,
            output_dim: f.num("output_dim")?,
            dropout: f.num("dropout")?,
        })
    }
}

/// Parses a comma-separated list of convolution specs.
pub fn parse_convs(s: &str) -> Result<Vec<ConvSpec>> {
    convs(s)
}
