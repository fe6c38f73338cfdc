//! Parameterised building blocks. Each block registers its parameters in a
//! [`ParamStore`] at construction and binds them on every forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ConvSpec;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()).expect("shape")
}

/// Xavier-uniform limit.
fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, vec![inputs, outputs], xavier(inputs, outputs)));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![outputs]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        g.dense(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    axis: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, axis: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0)),
            axis,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let running = (store.get(self.mean), store.get(self.var));
        let (y, stats) = g.batchnorm(x, gamma, beta, self.axis, running, BN_EPS)?;
        if let Some((mean, var)) = stats {
            let blend = |old: &Tensor, new: Tensor| {
                let data = old
                    .data()
                    .iter()
                    .zip(new.data())
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect();
                Tensor::new(old.shape().to_vec(), data).expect("shape")
            };
            let m = blend(store.get(self.mean), mean);
            let v = blend(store.get(self.var), var);
            g.push_buffer_update(self.mean, m);
            g.push_buffer_update(self.var, v);
        }
        Ok(y)
    }
}

/// Convolution (or frequency-only transposed convolution), ELU, batch norm
/// over channels, dropout. Operates on `[B, C, T, F]`.
#[derive(Debug, Clone)]
pub(crate) struct ConvGroup {
    w: ParamId,
    b: ParamId,
    bn: BatchNorm,
    stride: usize,
    transpose: bool,
    dropout: f64,
}

impl ConvGroup {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        spec: &ConvSpec,
        transpose: bool,
        dropout: f64,
    ) -> Self {
        let [kt, kf] = spec.kernel;
        let (shape, fan_in, fan_out) = if transpose {
            (vec![in_channels, spec.channels, kt, kf], in_channels * kt * kf, spec.channels * kt * kf)
        } else {
            (vec![spec.channels, in_channels, kt, kf], in_channels * kt * kf, spec.channels * kt * kf)
        };
        let w = store.add(format!("{name}.w"), uniform(rng, shape, xavier(fan_in, fan_out)));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![spec.channels]));
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.channels, 1);
        Self {
            w,
            b,
            bn,
            stride: spec.stride[1],
            transpose,
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = if self.transpose {
            g.conv_transpose2d(x, w, b, self.stride)?
        } else {
            g.conv2d(x, w, b, self.stride)?
        };
        let y = g.elu(y)?;
        let y = self.bn.forward(g, store, y)?;
        g.dropout(y, self.dropout)
    }
}

/// Per-frame pointwise convolution (bins as input channels), ELU, batch
/// norm, dropout. Operates on `[B, T, Cin]`.
#[derive(Debug, Clone)]
pub(crate) struct PointwiseGroup {
    proj: Dense,
    bn: BatchNorm,
    dropout: f64,
}

impl PointwiseGroup {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        dropout: f64,
    ) -> Self {
        Self {
            proj: Dense::new(store, rng, name, inputs, outputs),
            bn: BatchNorm::new(store, &format!("{name}.bn"), outputs, 2),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.proj.forward(g, store, x)?;
        let y = g.elu(y)?;
        let y = self.bn.forward(g, store, y)?;
        g.dropout(y, self.dropout)
    }
}

fn recurrent_limit(hidden: usize) -> f64 {
    1.0 / (hidden as f64).sqrt()
}

/// GRU over `[B, T, In] -> [B, T, H]`, zero initial state.
#[derive(Debug, Clone)]
pub(crate) struct Gru {
    w_ih: ParamId,
    b_ih: ParamId,
    w_hh: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, hidden: usize) -> Self {
        let k = recurrent_limit(hidden);
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, vec![inputs, 3 * hidden], k)),
            b_ih: store.add(format!("{name}.b_ih"), uniform(rng, vec![3 * hidden], k)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, vec![hidden, 3 * hidden], k)),
            b_hh: store.add(format!("{name}.b_hh"), uniform(rng, vec![3 * hidden], k)),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let w_ih = g.param(store, self.w_ih)?;
        let b_ih = g.param(store, self.b_ih)?;
        let w_hh = g.param(store, self.w_hh)?;
        let b_hh = g.param(store, self.b_hh)?;
        let xw = g.dense(x, w_ih, Some(b_ih))?;
        let mut h = g.constant(Tensor::zeros(vec![b, self.hidden]))?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.select_time(xw, step)?;
            h = g.gru_step(xt, h, w_hh, b_hh)?;
            outs.push(h);
        }
        g.stack_time(&outs)
    }
}

/// LSTM over `[B, T, In] -> [B, T, H]`, zero initial state.
#[derive(Debug, Clone)]
pub(crate) struct Lstm {
    w_ih: ParamId,
    b: ParamId,
    w_hh: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, hidden: usize) -> Self {
        let k = recurrent_limit(hidden);
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(rng, vec![inputs, 4 * hidden], k)),
            b: store.add(format!("{name}.b"), uniform(rng, vec![4 * hidden], k)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(rng, vec![hidden, 4 * hidden], k)),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let w_ih = g.param(store, self.w_ih)?;
        let bias = g.param(store, self.b)?;
        let w_hh = g.param(store, self.w_hh)?;
        let xw = g.dense(x, w_ih, Some(bias))?;
        let mut state = g.constant(Tensor::zeros(vec![b, 2 * self.hidden]))?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.select_time(xw, step)?;
            state = g.lstm_step(xt, state, w_hh)?;
            outs.push(g.slice_last(state, 0, self.hidden)?);
        }
        g.stack_time(&outs)
    }
}
