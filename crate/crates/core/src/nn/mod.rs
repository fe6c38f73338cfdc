//! Mask-estimation networks.
//!
//! All networks take linear magnitudes `[B, T, F]`, compress them with
//! `ln(1 + x)` and emit a sigmoid mask `[B, T, D]`. Convolutions are causal
//! in time, so output frame `t` depends only on input frames `<= t`.

mod checkpoint;
mod config;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    parse_convs, ConvSpec, CrnnHighbandConfig, EncoderDecoderConfig, StackedLstmConfig, VALID_OUTPUT_DIMS,
};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::dsp::{MagnitudeSpectrogram, Mask};
use crate::{Error, Result};
use layers::{ConvGroup, Dense, Gru, Lstm, PointwiseGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    CrnnHighband,
    EncoderDecoder,
    StackedLstm,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::CrnnHighband => "crnn-highband",
            NetKind::EncoderDecoder => "encoder-decoder",
            NetKind::StackedLstm => "stacked-lstm",
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "crnn-highband" => Ok(NetKind::CrnnHighband),
            "encoder-decoder" => Ok(NetKind::EncoderDecoder),
            "stacked-lstm" => Ok(NetKind::StackedLstm),
            other => Err(Error::Config(format!("unknown network kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetConfig {
    CrnnHighband(CrnnHighbandConfig),
    EncoderDecoder(EncoderDecoderConfig),
    StackedLstm(StackedLstmConfig),
}

impl NetConfig {
    pub fn kind(&self) -> NetKind {
        match self {
            NetConfig::CrnnHighband(_) => NetKind::CrnnHighband,
            NetConfig::EncoderDecoder(_) => NetKind::EncoderDecoder,
            NetConfig::StackedLstm(_) => NetKind::StackedLstm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetConfig::CrnnHighband(c) => c.validate(),
            NetConfig::EncoderDecoder(c) => c.validate(),
            NetConfig::StackedLstm(c) => c.validate(),
        }
    }

    pub fn input_dims(&self) -> Vec<usize> {
        match self {
            NetConfig::CrnnHighband(c) => vec![c.high_bins, c.wide_bins],
            NetConfig::EncoderDecoder(c) => vec![c.input_dim],
            NetConfig::StackedLstm(c) => vec![c.input_dim],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            NetConfig::CrnnHighband(c) => c.dense,
            NetConfig::EncoderDecoder(c) => c.output_dim,
            NetConfig::StackedLstm(c) => c.output_dim,
        }
    }
}

#[derive(Debug, Clone)]
struct CrnnBody {
    convs: Vec<ConvGroup>,
    lower: PointwiseGroup,
    grus: Vec<Gru>,
    head: Dense,
    dropout: f64,
}

#[derive(Debug, Clone)]
struct EncDecBody {
    convs: Vec<ConvGroup>,
    grus: Vec<Gru>,
    bridge_channels: usize,
    deconvs: Vec<ConvGroup>,
    head: Dense,
    dropout: f64,
}

#[derive(Debug, Clone)]
struct LstmBody {
    proj: Dense,
    layers: Vec<Lstm>,
    head: Dense,
    dropout: f64,
}

#[derive(Debug, Clone)]
enum Body {
    Crnn(CrnnBody),
    EncDec(EncDecBody),
    Lstm(LstmBody),
}

/// A network: its configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    store: ParamStore,
    body: Body,
}

fn conv_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_channels: usize,
    specs: &[ConvSpec],
    transpose: bool,
    dropout: f64,
) -> Vec<ConvGroup> {
    let mut ch = in_channels;
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let layer = ConvGroup::new(store, rng, &format!("{prefix}{i}"), ch, s, transpose, dropout);
            ch = s.channels;
            layer
        })
        .collect()
}

fn gru_stack(store: &mut ParamStore, rng: &mut ChaCha8Rng, inputs: usize, units: &[usize]) -> Vec<Gru> {
    let mut width = inputs;
    units
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let layer = Gru::new(store, rng, &format!("gru{i}"), width, h);
            width = h;
            layer
        })
        .collect()
}

/// `[B, C, T, F] -> [B, T, C * F]`.
fn flatten_channels(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// `[B, T, F] -> [B, 1, T, F]` after log compression.
fn compressed_map(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.log1p(x)?;
    g.reshape(y, &[s[0], 1, s[1], s[2]])
}

impl Network {
    /// Builds a freshly initialised network; initialisation is a pure
    /// function of `seed`.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let body = match &config {
            NetConfig::CrnnHighband(c) => {
                let convs = conv_stack(&mut store, &mut rng, "upper.conv", 1, &c.convs, false, c.dropout);
                let lower = PointwiseGroup::new(&mut store, &mut rng, "lower.conv", c.wide_bins, c.pointwise, c.dropout);
                let grus = gru_stack(&mut store, &mut rng, c.recurrent_input()?, &c.gru);
                let head = Dense::new(&mut store, &mut rng, "head", *c.gru.last().unwrap(), c.dense);
                Body::Crnn(CrnnBody { convs, lower, grus, head, dropout: c.dropout })
            }
            NetConfig::EncoderDecoder(c) => {
                let enc = c.encoder_chain()?;
                let dec = c.decoder_chain()?;
                let convs = conv_stack(&mut store, &mut rng, "enc.conv", 1, &c.convs, false, c.dropout);
                let flat = enc.last().unwrap() * c.convs.last().unwrap().channels;
                let grus = gru_stack(&mut store, &mut rng, flat, &c.gru);
                let deconvs =
                    conv_stack(&mut store, &mut rng, "dec.deconv", c.bridge_channels, &c.deconvs, true, c.dropout);
                let dec_flat = dec.last().unwrap() * c.deconvs.last().map_or(c.bridge_channels, |d| d.channels);
                let head = Dense::new(&mut store, &mut rng, "head", dec_flat, c.output_dim);
                Body::EncDec(EncDecBody {
                    convs,
                    grus,
                    bridge_channels: c.bridge_channels,
                    deconvs,
                    head,
                    dropout: c.dropout,
                })
            }
            NetConfig::StackedLstm(c) => {
                let proj = Dense::new(&mut store, &mut rng, "proj", c.input_dim, c.projection);
                let mut width = c.projection;
                let layers = c
                    .hidden
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| {
                        let l = Lstm::new(&mut store, &mut rng, &format!("lstm{i}"), width, h);
                        width = h;
                        l
                    })
                    .collect();
                let head = Dense::new(&mut store, &mut rng, "head", width, c.output_dim);
                Body::Lstm(LstmBody { proj, layers, head, dropout: c.dropout })
            }
        };
        Ok(Self { config, store, body })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.config.kind()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.config.input_dims()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Writes running statistics collected by a training pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        Ok(())
    }

    fn check_inputs(&self, g: &Graph, inputs: &[Var]) -> Result<(usize, usize)> {
        let dims = self.input_dims();
        if inputs.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} expects {} inputs, got {}",
                self.kind(),
                dims.len(),
                inputs.len()
            )));
        }
        let s0 = g.shape(inputs[0]);
        if s0.len() != 3 || s0[1] == 0 {
            return Err(Error::Shape(format!("network input must be [B, T, F] with T >= 1, got {s0:?}")));
        }
        let (b, t) = (s0[0], s0[1]);
        for (&v, &d) in inputs.iter().zip(&dims) {
            let s = g.shape(v);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(Error::Shape(format!("{} input {s:?}, expected [{b}, T, {d}]", self.kind())));
            }
            if s[1] != t {
                return Err(Error::Shape(format!("frame count mismatch: {} vs {t}", s[1])));
            }
            if g.value(v).data().iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidInput("negative magnitude".into()));
            }
        }
        Ok((b, t))
    }

    /// Mask `[B, T, D]` from magnitude inputs (`[B, T, F]` each), with
    /// parameters taken from `store` (normally [`Network::store`]).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, inputs: &[Var]) -> Result<Var> {
        let (b, t) = self.check_inputs(g, inputs)?;
        let logits = match &self.body {
            Body::Crnn(n) => {
                let mut up = compressed_map(g, inputs[0])?;
                for c in &n.convs {
                    up = c.forward(g, store, up)?;
                }
                let up = flatten_channels(g, up)?;
                let low = g.log1p(inputs[1])?;
                let low = n.lower.forward(g, store, low)?;
                let mut h = g.concat(&[up, low])?;
                for gru in &n.grus {
                    h = gru.forward(g, store, h)?;
                    h = g.dropout(h, n.dropout)?;
                }
                n.head.forward(g, store, h)?
            }
            Body::EncDec(n) => {
                let mut x = compressed_map(g, inputs[0])?;
                for c in &n.convs {
                    x = c.forward(g, store, x)?;
                }
                let mut h = flatten_channels(g, x)?;
                for gru in &n.grus {
                    h = gru.forward(g, store, h)?;
                    h = g.dropout(h, n.dropout)?;
                }
                let units = g.shape(h)[2];
                let folded = g.reshape(h, &[b, t, n.bridge_channels, units / n.bridge_channels])?;
                let mut y = g.permute(folded, &[0, 2, 1, 3])?;
                for d in &n.deconvs {
                    y = d.forward(g, store, y)?;
                }
                let y = flatten_channels(g, y)?;
                n.head.forward(g, store, y)?
            }
            Body::Lstm(n) => {
                let x = g.log1p(inputs[0])?;
                let mut h = n.proj.forward(g, store, x)?;
                for l in &n.layers {
                    h = l.forward(g, store, h)?;
                    h = g.dropout(h, n.dropout)?;
                }
                n.head.forward(g, store, h)?
            }
        };
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        self.forward_with(g, &self.store, inputs)
    }

    /// Inference on single utterances: dropout off, running statistics.
    pub fn infer(&self, inputs: &[&MagnitudeSpectrogram]) -> Result<Mask> {
        let mut g = Graph::eval();
        let vars = inputs
            .iter()
            .map(|m| g.constant(Tensor::new(vec![1, m.frames(), m.bins()], m.data().to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut g, &vars)?;
        let frames = g.shape(out)[1];
        Mask::from_vec(frames, self.output_dim(), g.value(out).data().to_vec())
    }
}
