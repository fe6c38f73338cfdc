use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::par::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses batch statistics.
    Train,
    /// Dropout is the identity, batch norm uses running statistics.
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Dense { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log1p(Var),
    Abs(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SliceLast { x: Var, start: usize },
    SelectTime { x: Var, t: usize },
    StackTime(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize },
    BatchNorm(Box<BatchNormSaved>),
    Dropout { x: Var, mask: Vec<f64> },
    GruStep(Box<GruSaved>),
    LstmStep(Box<LstmSaved>),
}

#[derive(Debug)]
struct BatchNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug)]
struct GruSaved {
    xw: Var,
    h: Var,
    w_hh: Var,
    b_hh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug)]
struct LstmSaved {
    xw: Var,
    state: Var,
    w_hh: Var,
    /// Activated gates, `[B, 4H]` in i, f, g, o order.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. One forward pass, at most one backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    consumed: bool,
    exec: Exec,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// One gradient per store entry; entries that did not take part in the
    /// forward pass (and buffers) get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 { 0 } else { shape.iter().product::<usize>() / last };
    (rows, last)
}

/// (outer, channels, inner) sizes around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (shape `shape`) into `dst` laid out as `shape[perm]`.
fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let src_step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut offset = 0usize;
    for d in dst.iter_mut() {
        *d = src[offset];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    time: usize,
    fin: usize,
    cout: usize,
    kt: usize,
    kf: usize,
    fout: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kt * self.kf
    }
}

/// im2col for a causal-in-time, valid-in-frequency convolution of one batch
/// element `x` (`[Cin, T, F]`). Rows are `(t, fo)`, columns `(ci, dt, df)`.
fn im2col(x: &[f64], d: &ConvDims, stride: usize) -> Vec<f64> {
    let k = d.k();
    let mut cols = vec![0.0; d.time * d.fout * k];
    for t in 0..d.time {
        for fo in 0..d.fout {
            let row = &mut cols[(t * d.fout + fo) * k..(t * d.fout + fo + 1) * k];
            for ci in 0..d.cin {
                for dt in 0..d.kt {
                    let ts = t as isize + dt as isize - (d.kt as isize - 1);
                    if ts < 0 {
                        continue;
                    }
                    let src = &x[(ci * d.time + ts as usize) * d.fin + fo * stride..];
                    let dst = &mut row[(ci * d.kt + dt) * d.kf..(ci * d.kt + dt + 1) * d.kf];
                    dst.copy_from_slice(&src[..d.kf]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &ConvDims, stride: usize, dx: &mut [f64]) {
    let k = d.k();
    for t in 0..d.time {
        for fo in 0..d.fout {
            let row = &cols[(t * d.fout + fo) * k..(t * d.fout + fo + 1) * k];
            for ci in 0..d.cin {
                for dt in 0..d.kt {
                    let ts = t as isize + dt as isize - (d.kt as isize - 1);
                    if ts < 0 {
                        continue;
                    }
                    let base = (ci * d.time + ts as usize) * d.fin + fo * stride;
                    let src = &row[(ci * d.kt + dt) * d.kf..(ci * d.kt + dt + 1) * d.kf];
                    for (j, v) in src.iter().enumerate() {
                        dx[base + j] += v;
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
            exec: Exec::default(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Buffer values (running statistics) computed during a training pass.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_leaf(t: &Tensor) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite("graph input".into()));
        }
        Ok(())
    }

    /// Input that does not require a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        Self::check_leaf(&t)?;
        self.push(t, Op::Leaf, false)
    }

    /// Input that requires a gradient (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        Self::check_leaf(&t)?;
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Buffers bind as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id).clone();
        Self::check_leaf(&t)?;
        let rg = store.is_trainable(id);
        self.push(t, Op::Param(id), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `x · w (+ b)` over the last axis of `x`; `w` is `[K, N]`, `b` is `[N]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, k) = split_last(&xs);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape(format!("dense: input {xs:?} with weight {ws:?}")));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::Shape(format!("dense: bias {:?} for {n} outputs", self.shape(b))));
            }
        }
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n.max(1)) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dense(a, b, None)
    }

    /// Per-frame projection `[B, T, Cin] -> [B, T, Cout]`: a 1-D convolution
    /// with kernel size 1 and stride 1, weight `[Cin, Cout]`.
    pub fn conv1d_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.dense(x, w, Some(b))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.map_value(a, |x| x * k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.map_value(a, f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    /// `x` for `x > 0`, `e^x - 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= -1.0) {
            return Err(Error::InvalidInput("log1p of a value <= -1".into()));
        }
        self.unary(a, f64::ln_1p, Op::Log1p(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- shape ----------------------------------------------------------

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!("concat: {:?} vs leading {lead:?}", s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute {perm:?} of rank-{} tensor", s.len())));
        }
        let mut out = vec![0.0; self.value(a).len()];
        permute_into(self.value(a).data(), &s, perm, &mut out);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Permute { x: a, perm: perm.to_vec() }, rg)
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (rows, w) = split_last(&s);
        if start + len > w {
            return Err(Error::Shape(format!("slice {start}+{len} of width {w}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x: a, start }, rg)
    }

    /// `[B, T, N] -> [B, N]` at time `t`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::Shape(format!("select_time {t} of {s:?}")));
        }
        let (b, tt, n) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * n);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * tt + t) * n..(bi * tt + t + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![b, n], out)?, Op::SelectTime { x: a, t }, rg)
    }

    /// `T x [B, N] -> [B, T, N]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::Shape("stack_time of nothing".into()));
        }
        let s0 = self.shape(steps[0]).to_vec();
        if s0.len() != 2 || steps.iter().any(|&v| self.shape(v) != s0) {
            return Err(Error::Shape("stack_time needs equal [B, N] steps".into()));
        }
        let (b, n, tt) = (s0[0], s0[1], steps.len());
        let mut out = vec![0.0; b * tt * n];
        for (t, &v) in steps.iter().enumerate() {
            let src = self.value(v).data();
            for bi in 0..b {
                out[(bi * tt + t) * n..(bi * tt + t + 1) * n].copy_from_slice(&src[bi * n..(bi + 1) * n]);
            }
        }
        let rg = self.rg(steps);
        self.push(Tensor::new(vec![b, tt, n], out)?, Op::StackTime(steps.to_vec()), rg)
    }

    // ---- convolution ----------------------------------------------------

    fn conv_dims(&self, x: Var, w: Var, stride: usize, transpose: bool) -> Result<ConvDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || stride == 0 {
            return Err(Error::Shape(format!("conv: input {xs:?}, weight {ws:?}, stride {stride}")));
        }
        let (batch, cin, time, fin) = (xs[0], xs[1], xs[2], xs[3]);
        if transpose {
            let (wcin, cout, kt, kf) = (ws[0], ws[1], ws[2], ws[3]);
            if wcin != cin || kt != 1 {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: weight {ws:?} for {cin} input channels (time kernel must be 1)"
                )));
            }
            let fout = (fin.max(1) - 1) * stride + kf;
            Ok(ConvDims { batch, cin, time, fin, cout, kt, kf, fout })
        } else {
            let (cout, wcin, kt, kf) = (ws[0], ws[1], ws[2], ws[3]);
            if wcin != cin || fin < kf || kt == 0 || kf == 0 {
                return Err(Error::Shape(format!("conv2d: weight {ws:?} for input {xs:?}")));
            }
            let fout = (fin - kf) / stride + 1;
            Ok(ConvDims { batch, cin, time, fin, cout, kt, kf, fout })
        }
    }

    /// 2-D convolution over `[B, Cin, T, F]` with weight `[Cout, Cin, kt, kf]`:
    /// causal in time (left padding `kt - 1`, stride 1), valid in frequency
    /// with stride `stride`. Output `[B, Cout, T, (F - kf) / stride + 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, false)?;
        if self.shape(b) != [d.cout] {
            return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
        }
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bias = self.value(b).data();
        let in_sz = d.cin * d.time * d.fin;
        let out_sz = d.cout * d.time * d.fout;
        let rows = d.time * d.fout;
        let per_batch = self.exec.map_range(d.batch, |bi| {
            let cols = im2col(&xin[bi * in_sz..(bi + 1) * in_sz], &d, stride);
            let mut out = vec![0.0; out_sz];
            gemm(d.cout, d.k(), rows, wv, false, &cols, true, &mut out, 0.0);
            for (co, chunk) in out.chunks_mut(rows.max(1)).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
            out
        });
        let t = Tensor::new(vec![d.batch, d.cout, d.time, d.fout], per_batch.concat())?;
        let rg = self.rg(&[x, w, b]);
        self.push(t, Op::Conv2d { x, w, b, stride }, rg)
    }

    /// Transposed convolution along frequency over `[B, Cin, T, F]` with
    /// weight `[Cin, Cout, 1, kf]`. Output `[B, Cout, T, (F - 1) * stride + kf]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, true)?;
        if self.shape(b) != [d.cout] {
            return Err(Error::Shape(format!("conv_transpose2d bias {:?}", self.shape(b))));
        }
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bias = self.value(b).data();
        let in_sz = d.cin * d.time * d.fin;
        let out_sz = d.cout * d.time * d.fout;
        let rows = d.time * d.fin;
        let ck = d.cout * d.kf;
        let per_batch = self.exec.map_range(d.batch, |bi| {
            // cols[(t, f), (co, df)] = sum_ci x[ci, t, f] w[ci, co, df]
            let mut cols = vec![0.0; rows * ck];
            gemm(rows, d.cin, ck, &xin[bi * in_sz..(bi + 1) * in_sz], true, wv, false, &mut cols, 0.0);
            let mut out = vec![0.0; out_sz];
            for co in 0..d.cout {
                out[co * d.time * d.fout..(co + 1) * d.time * d.fout].fill(bias[co]);
            }
            for t in 0..d.time {
                for f in 0..d.fin {
                    let row = &cols[(t * d.fin + f) * ck..(t * d.fin + f + 1) * ck];
                    for co in 0..d.cout {
                        let base = (co * d.time + t) * d.fout + f * stride;
                        for df in 0..d.kf {
                            out[base + df] += row[co * d.kf + df];
                        }
                    }
                }
            }
            out
        });
        let t = Tensor::new(vec![d.batch, d.cout, d.time, d.fout], per_batch.concat())?;
        let rg = self.rg(&[x, w, b]);
        self.push(t, Op::ConvTranspose2d { x, w, b, stride }, rg)
    }

    // ---- normalisation & regularisation ---------------------------------

    /// Batch normalisation per channel along `axis`, statistics over every
    /// other axis. In [`Mode::Train`] batch statistics are used and the
    /// returned pair holds the batch mean and unbiased variance for the
    /// caller's running averages; in [`Mode::Eval`] `running` is used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        running: (&Tensor, &Tensor),
        eps: f64,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("batchnorm axis {axis} of {s:?}")));
        }
        let (outer, c, inner) = around_axis(&s, axis);
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!("batchnorm affine {:?} for {c} channels", self.shape(v))));
            }
        }
        if running.0.shape() != [c] || running.1.shape() != [c] {
            return Err(Error::Shape("batchnorm running statistics".into()));
        }
        let n = outer * inner;
        let xv = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut stats = None;
        if batch_stats {
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    var[ch] += xv[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            let unbiased: Vec<f64> = var.iter().map(|v| v / (n.max(2) - 1) as f64).collect();
            var.iter_mut().for_each(|v| *v /= n as f64);
            stats = Some((Tensor::new(vec![c], mean.clone())?, Tensor::new(vec![c], unbiased)?));
        } else {
            mean.copy_from_slice(running.0.data());
            var.copy_from_slice(running.1.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm(Box::new(BatchNormSaved { x, gamma, beta, axis, xhat, inv_std, batch_stats })),
            rg,
        )?;
        Ok((v, stats))
    }

    /// Inverted dropout: zeroes with probability `rate` and rescales by
    /// `1 / (1 - rate)` in training; the identity in evaluation.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidInput(format!("dropout rate {rate}")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    // ---- recurrent cells ------------------------------------------------

    /// One GRU step. `xw` is the input projection `x W_ih + b_ih` (`[B, 3H]`,
    /// gate order r, z, n), `h` is `[B, H]`, `w_hh` is `[H, 3H]`, `b_hh` is
    /// `[3H]`:
    ///
    /// ```text
    /// r = σ(xr + h Whr + bhr)      z = σ(xz + h Whz + bhz)
    /// n = tanh(xn + r ⊙ (h Whn + bhn))
    /// h' = (1 - z) ⊙ n + z ⊙ h
    /// ```
    pub fn gru_step(&mut self, xw: Var, h: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        if hs.len() != 2 {
            return Err(Error::Shape(format!("gru_step state {hs:?}")));
        }
        let (b, hd) = (hs[0], hs[1]);
        if self.shape(xw) != [b, 3 * hd] || self.shape(w_hh) != [hd, 3 * hd] || self.shape(b_hh) != [3 * hd] {
            return Err(Error::Shape(format!(
                "gru_step: xw {:?}, h {hs:?}, w_hh {:?}, b_hh {:?}",
                self.shape(xw),
                self.shape(w_hh),
                self.shape(b_hh)
            )));
        }
        let mut hh = vec![0.0; b * 3 * hd];
        gemm(b, hd, 3 * hd, self.value(h).data(), false, self.value(w_hh).data(), false, &mut hh, 0.0);
        let bias = self.value(b_hh).data();
        let xv = self.value(xw).data();
        let hv = self.value(h).data();
        let mut r = vec![0.0; b * hd];
        let mut z = vec![0.0; b * hd];
        let mut n = vec![0.0; b * hd];
        let mut hn = vec![0.0; b * hd];
        let mut out = vec![0.0; b * hd];
        for bi in 0..b {
            for j in 0..hd {
                let g = bi * 3 * hd;
                let i = bi * hd + j;
                let rr = sigmoid(xv[g + j] + hh[g + j] + bias[j]);
                let zz = sigmoid(xv[g + hd + j] + hh[g + hd + j] + bias[hd + j]);
                let hnn = hh[g + 2 * hd + j] + bias[2 * hd + j];
                let nn = (xv[g + 2 * hd + j] + rr * hnn).tanh();
                r[i] = rr;
                z[i] = zz;
                n[i] = nn;
                hn[i] = hnn;
                out[i] = (1.0 - zz) * nn + zz * hv[i];
            }
        }
        let rg = self.rg(&[xw, h, w_hh, b_hh]);
        self.push(
            Tensor::new(vec![b, hd], out)?,
            Op::GruStep(Box::new(GruSaved { xw, h, w_hh, b_hh, r, z, n, hn })),
            rg,
        )
    }

    /// One LSTM step over a packed state `[B, 2H]` holding `[h | c]` per row.
    /// `xw` is `x W_ih + b` (`[B, 4H]`, gate order i, f, g, o) and `w_hh` is
    /// `[H, 4H]`. Returns the packed `[h' | c']`.
    pub fn lstm_step(&mut self, xw: Var, state: Var, w_hh: Var) -> Result<Var> {
        let ss = self.shape(state).to_vec();
        if ss.len() != 2 || !ss[1].is_multiple_of(2) {
            return Err(Error::Shape(format!("lstm_step state {ss:?}")));
        }
        let (b, hd) = (ss[0], ss[1] / 2);
        if self.shape(xw) != [b, 4 * hd] || self.shape(w_hh) != [hd, 4 * hd] {
            return Err(Error::Shape(format!(
                "lstm_step: xw {:?}, state {ss:?}, w_hh {:?}",
                self.shape(xw),
                self.shape(w_hh)
            )));
        }
        let sv = self.value(state).data();
        let h: Vec<f64> = (0..b).flat_map(|bi| sv[bi * 2 * hd..bi * 2 * hd + hd].iter().copied()).collect();
        let mut gates = vec![0.0; b * 4 * hd];
        gemm(b, hd, 4 * hd, &h, false, self.value(w_hh).data(), false, &mut gates, 0.0);
        let xv = self.value(xw).data();
        let mut tanh_c = vec![0.0; b * hd];
        let mut out = vec![0.0; b * 2 * hd];
        for bi in 0..b {
            let g = &mut gates[bi * 4 * hd..(bi + 1) * 4 * hd];
            for (gv, x) in g.iter_mut().zip(&xv[bi * 4 * hd..(bi + 1) * 4 * hd]) {
                *gv += x;
            }
            for j in 0..hd {
                g[j] = sigmoid(g[j]);
                g[hd + j] = sigmoid(g[hd + j]);
                g[2 * hd + j] = g[2 * hd + j].tanh();
                g[3 * hd + j] = sigmoid(g[3 * hd + j]);
                let c_prev = sv[bi * 2 * hd + hd + j];
                let c = g[hd + j] * c_prev + g[j] * g[2 * hd + j];
                let tc = c.tanh();
                tanh_c[bi * hd + j] = tc;
                out[bi * 2 * hd + j] = g[3 * hd + j] * tc;
                out[bi * 2 * hd + hd + j] = c;
            }
        }
        let rg = self.rg(&[xw, state, w_hh]);
        self.push(
            Tensor::new(vec![b, 2 * hd], out)?,
            Op::LstmStep(Box::new(LstmSaved { xw, state, w_hh, gates, tanh_c })),
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff("backward already ran on this tape; run a new forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Autodiff("loss is detached from every parameter".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                _ => self.backprop(i, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(slot.data_mut());
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Dense { x, w, b } => {
                let (rows, k) = split_last(self.shape(*x));
                let n = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| gemm(rows, n, k, gd, false, wv, true, dx, 1.0));
                self.accumulate(grads, *w, |dw| gemm(k, rows, n, xv, true, gd, false, dw, 1.0));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for row in gd.chunks(n.max(1)) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * b;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g * k));
            }
            Op::Elu(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for (((d, g), x), y) in d.iter_mut().zip(gd).zip(xv).zip(y) {
                        *d += if *x > 0.0 { *g } else { g * (y + 1.0) };
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Log1p(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(xv) {
                        *d += g / (1.0 + x);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        } else if *x < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Concat(parts) => {
                let (rows, total) = split_last(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.accumulate(grads, p, |d| {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let mut back = vec![0.0; gd.len()];
                permute_into(gd, node.value.shape(), &inv, &mut back);
                self.accumulate(grads, *x, |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::SliceLast { x, start } => {
                let (rows, w) = split_last(self.shape(*x));
                let len = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        let dst = &mut d[r * w + start..r * w + start + len];
                        dst.iter_mut().zip(&gd[r * len..(r + 1) * len]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SelectTime { x, t } => {
                let s = self.shape(*x);
                let (b, tt, n) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |d| {
                    for bi in 0..b {
                        let dst = &mut d[(bi * tt + t) * n..(bi * tt + t + 1) * n];
                        dst.iter_mut().zip(&gd[bi * n..(bi + 1) * n]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::StackTime(steps) => {
                let s = node.value.shape();
                let (b, tt, n) = (s[0], s[1], s[2]);
                for (t, &v) in steps.iter().enumerate() {
                    self.accumulate(grads, v, |d| {
                        for bi in 0..b {
                            let src = &gd[(bi * tt + t) * n..(bi * tt + t + 1) * n];
                            d[bi * n..(bi + 1) * n].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride } => self.conv2d_backward(*x, *w, *b, *stride, gd, grads)?,
            Op::ConvTranspose2d { x, w, b, stride } => {
                self.conv_transpose2d_backward(*x, *w, *b, *stride, gd, grads)?
            }
            Op::BatchNorm(s) => {
                let shape = self.shape(s.x).to_vec();
                let (outer, c, inner) = around_axis(&shape, s.axis);
                let n = (outer * inner) as f64;
                let gamma = self.value(s.gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += gd[i] * s.xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                self.accumulate(grads, s.gamma, |d| d.iter_mut().zip(&dgamma).for_each(|(d, g)| *d += g));
                self.accumulate(grads, s.beta, |d| d.iter_mut().zip(&dbeta).for_each(|(d, g)| *d += g));
                self.accumulate(grads, s.x, |d| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gamma[ch] * s.inv_std[ch];
                            for i in base..base + inner {
                                d[i] += if s.batch_stats {
                                    k * (gd[i] - dbeta[ch] / n - s.xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    for ((d, g), m) in d.iter_mut().zip(gd).zip(mask) {
                        *d += g * m;
                    }
                });
            }
            Op::GruStep(s) => {
                let hs = self.shape(s.h);
                let (b, hd) = (hs[0], hs[1]);
                let hv = self.value(s.h).data();
                let mut dxw = vec![0.0; b * 3 * hd];
                let mut dhh = vec![0.0; b * 3 * hd];
                let mut dh_direct = vec![0.0; b * hd];
                for bi in 0..b {
                    for j in 0..hd {
                        let i = bi * hd + j;
                        let g3 = bi * 3 * hd;
                        let (r, z, n) = (s.r[i], s.z[i], s.n[i]);
                        let dn = gd[i] * (1.0 - z);
                        let dz = gd[i] * (hv[i] - n);
                        dh_direct[i] = gd[i] * z;
                        let dn_pre = dn * (1.0 - n * n);
                        let dr_pre = dn_pre * s.hn[i] * r * (1.0 - r);
                        let dz_pre = dz * z * (1.0 - z);
                        dxw[g3 + j] = dr_pre;
                        dxw[g3 + hd + j] = dz_pre;
                        dxw[g3 + 2 * hd + j] = dn_pre;
                        dhh[g3 + j] = dr_pre;
                        dhh[g3 + hd + j] = dz_pre;
                        dhh[g3 + 2 * hd + j] = dn_pre * r;
                    }
                }
                let wv = self.value(s.w_hh).data();
                self.accumulate(grads, s.xw, |d| d.iter_mut().zip(&dxw).for_each(|(d, g)| *d += g));
                self.accumulate(grads, s.h, |d| {
                    d.iter_mut().zip(&dh_direct).for_each(|(d, g)| *d += g);
                    gemm(b, 3 * hd, hd, &dhh, false, wv, true, d, 1.0);
                });
                self.accumulate(grads, s.w_hh, |d| gemm(hd, b, 3 * hd, hv, true, &dhh, false, d, 1.0));
                self.accumulate(grads, s.b_hh, |d| {
                    for row in dhh.chunks(3 * hd) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::LstmStep(s) => {
                let ss = self.shape(s.state);
                let (b, hd) = (ss[0], ss[1] / 2);
                let sv = self.value(s.state).data();
                let mut dgates = vec![0.0; b * 4 * hd];
                let mut dstate = vec![0.0; b * 2 * hd];
                for bi in 0..b {
                    let ga = &s.gates[bi * 4 * hd..(bi + 1) * 4 * hd];
                    for j in 0..hd {
                        let (ig, fg, gg, og) = (ga[j], ga[hd + j], ga[2 * hd + j], ga[3 * hd + j]);
                        let tc = s.tanh_c[bi * hd + j];
                        let dh = gd[bi * 2 * hd + j];
                        let dc = gd[bi * 2 * hd + hd + j] + dh * og * (1.0 - tc * tc);
                        let c_prev = sv[bi * 2 * hd + hd + j];
                        let dg = &mut dgates[bi * 4 * hd..(bi + 1) * 4 * hd];
                        dg[j] = dc * gg * ig * (1.0 - ig);
                        dg[hd + j] = dc * c_prev * fg * (1.0 - fg);
                        dg[2 * hd + j] = dc * ig * (1.0 - gg * gg);
                        dg[3 * hd + j] = dh * tc * og * (1.0 - og);
                        dstate[bi * 2 * hd + hd + j] = dc * fg;
                    }
                }
                let wv = self.value(s.w_hh).data();
                let mut dh = vec![0.0; b * hd];
                gemm(b, 4 * hd, hd, &dgates, false, wv, true, &mut dh, 0.0);
                for bi in 0..b {
                    dstate[bi * 2 * hd..bi * 2 * hd + hd].copy_from_slice(&dh[bi * hd..(bi + 1) * hd]);
                }
                let h: Vec<f64> = (0..b).flat_map(|bi| sv[bi * 2 * hd..bi * 2 * hd + hd].iter().copied()).collect();
                self.accumulate(grads, s.xw, |d| d.iter_mut().zip(&dgates).for_each(|(d, g)| *d += g));
                self.accumulate(grads, s.state, |d| d.iter_mut().zip(&dstate).for_each(|(d, g)| *d += g));
                self.accumulate(grads, s.w_hh, |d| gemm(hd, b, 4 * hd, &h, true, &dgates, false, d, 1.0));
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let d = self.conv_dims(x, w, stride, false)?;
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let in_sz = d.cin * d.time * d.fin;
        let out_sz = d.cout * d.time * d.fout;
        let rows = d.time * d.fout;
        let k = d.k();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let parts = self.exec.map_range(d.batch, |bi| {
            let dy = &gd[bi * out_sz..(bi + 1) * out_sz];
            let mut dw = Vec::new();
            if need_w {
                let cols = im2col(&xin[bi * in_sz..(bi + 1) * in_sz], &d, stride);
                dw = vec![0.0; d.cout * k];
                gemm(d.cout, rows, k, dy, false, &cols, false, &mut dw, 0.0);
            }
            let mut dx = Vec::new();
            if need_x {
                let mut dcols = vec![0.0; rows * k];
                gemm(rows, d.cout, k, dy, true, wv, false, &mut dcols, 0.0);
                dx = vec![0.0; in_sz];
                col2im(&dcols, &d, stride, &mut dx);
            }
            let db: Vec<f64> = dy.chunks(rows.max(1)).map(|c| c.iter().sum()).collect();
            (dw, dx, db)
        });
        self.accumulate(grads, w, |acc| {
            for (dw, _, _) in &parts {
                acc.iter_mut().zip(dw).for_each(|(a, g)| *a += g);
            }
        });
        self.accumulate(grads, b, |acc| {
            for (_, _, db) in &parts {
                acc.iter_mut().zip(db).for_each(|(a, g)| *a += g);
            }
        });
        self.accumulate(grads, x, |acc| {
            for (bi, (_, dx, _)) in parts.iter().enumerate() {
                acc[bi * in_sz..(bi + 1) * in_sz].iter_mut().zip(dx).for_each(|(a, g)| *a += g);
            }
        });
        Ok(())
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let d = self.conv_dims(x, w, stride, true)?;
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let in_sz = d.cin * d.time * d.fin;
        let out_sz = d.cout * d.time * d.fout;
        let rows = d.time * d.fin;
        let ck = d.cout * d.kf;
        let parts = self.exec.map_range(d.batch, |bi| {
            let dy = &gd[bi * out_sz..(bi + 1) * out_sz];
            let mut dcols = vec![0.0; rows * ck];
            for t in 0..d.time {
                for f in 0..d.fin {
                    let row = &mut dcols[(t * d.fin + f) * ck..(t * d.fin + f + 1) * ck];
                    for co in 0..d.cout {
                        let base = (co * d.time + t) * d.fout + f * stride;
                        row[co * d.kf..(co + 1) * d.kf].copy_from_slice(&dy[base..base + d.kf]);
                    }
                }
            }
            // dX^T [rows, Cin] = dcols [rows, ck] · W^T
            let mut dxt = vec![0.0; rows * d.cin];
            gemm(rows, ck, d.cin, &dcols, false, wv, true, &mut dxt, 0.0);
            let mut dx = vec![0.0; in_sz];
            for r in 0..rows {
                for ci in 0..d.cin {
                    dx[ci * rows + r] = dxt[r * d.cin + ci];
                }
            }
            let mut dw = vec![0.0; d.cin * ck];
            gemm(d.cin, rows, ck, &xin[bi * in_sz..(bi + 1) * in_sz], false, &dcols, false, &mut dw, 0.0);
            let db: Vec<f64> = dy.chunks((d.time * d.fout).max(1)).map(|c| c.iter().sum()).collect();
            (dw, dx, db)
        });
        self.accumulate(grads, w, |acc| {
            for (dw, _, _) in &parts {
                acc.iter_mut().zip(dw).for_each(|(a, g)| *a += g);
            }
        });
        self.accumulate(grads, b, |acc| {
            for (_, _, db) in &parts {
                acc.iter_mut().zip(db).for_each(|(a, g)| *a += g);
            }
        });
        self.accumulate(grads, x, |acc| {
            for (bi, (_, dx, _)) in parts.iter().enumerate() {
                acc[bi * in_sz..(bi + 1) * in_sz].iter_mut().zip(dx).for_each(|(a, g)| *a += g);
            }
        });
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Dense { .. } => "dense",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Elu(_) => "elu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Log1p(_) => "log1p",
        Op::Abs(_) => "abs",
        Op::Sum(_) => "sum",
        Op::Concat(_) => "concat",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::SliceLast { .. } => "slice_last",
        Op::SelectTime { .. } => "select_time",
        Op::StackTime(_) => "stack_time",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::BatchNorm(_) => "batchnorm",
        Op::Dropout { .. } => "dropout",
        Op::GruStep(_) => "gru_step",
        Op::LstmStep(_) => "lstm_step",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_sigmoid_and_dropout_values() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let e = g.elu(x).unwrap();
        let e = g.value(e).data().to_vec();
        assert!((e[0] - (-0.6321205588285577)).abs() < 1e-12);
        assert_eq!(&e[1..], &[0.0, 2.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[1], 0.5);
        let d = g.dropout(x, 0.25).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut g = Graph::new(Mode::Train, 0);
        let w = g.leaf(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap()).unwrap();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.leaf(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.backward(c), Err(Error::Autodiff(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
        assert!(matches!(
            g.constant(Tensor::new(vec![1], vec![f64::NAN]).unwrap()),
            Err(Error::NonFinite(_))
        ));
        let big = g.constant(Tensor::scalar(1000.0)).unwrap();
        let e = g.scale(big, 1e306);
        assert!(matches!(e, Err(Error::NonFinite(_))));
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::zeros(vec![3]));
        let mut g = Graph::new(Mode::Train, 0);
        let u = g.param(&store, used).unwrap();
        let sq = g.mul(u, u).unwrap();
        let grads = g.backward(sq).unwrap();
        let all = grads.for_store(&store);
        assert_eq!(all[used.index()].item(), 4.0);
        assert_eq!(all[unused.index()].data(), &[0.0; 3]);
    }

    #[test]
    fn conv_shapes() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(vec![1, 1, 5, 512])).unwrap();
        let w = g.constant(Tensor::zeros(vec![45, 1, 4, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![45])).unwrap();
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 45, 5, 255]);
        let x = g.constant(Tensor::zeros(vec![1, 8, 5, 32])).unwrap();
        let w = g.constant(Tensor::zeros(vec![8, 8, 1, 5])).unwrap();
        let b = g.constant(Tensor::zeros(vec![8])).unwrap();
        let y = g.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 5, 67]);
    }
}
