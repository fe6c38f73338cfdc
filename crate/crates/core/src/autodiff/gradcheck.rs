//! Finite-difference gradient checking.
//!
//! The function under test maps input leaves to an arbitrary tensor; it is
//! reduced to a scalar by a fixed random projection so every output element
//! contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, ParamStore, Tensor, Var};
use crate::Result;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the norm-wise relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Report {
    /// Norm-wise relative error `|a - n| / max(|a| + |n|, tiny)` per input.
    pub errors: Vec<f64>,
}

impl Report {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_error() < TOLERANCE
    }
}

fn projected<F>(f: &F, inputs: &[Tensor], proj: &mut Option<Tensor>, seed: u64, mode: Mode) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode, seed);
    let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let p = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let shape = g.shape(out).to_vec();
        let n = g.value(out).len();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
    });
    let pv = g.constant(p.clone())?;
    let prod = g.mul(out, pv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Compares analytic and numerical gradients of `f` at `inputs`. The graph
/// is rebuilt with the same seed for every evaluation, so dropout masks are
/// identical across evaluations.
pub fn check<F>(f: F, inputs: &[Tensor], seed: u64, mode: Mode) -> Result<Report>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let (mut g, vars, loss) = projected(&f, inputs, &mut proj, seed, mode)?;
    let grads = g.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                let (g, _, loss) = projected(&f, &moved, &mut proj, seed, mode)?;
                Ok(g.value(loss).item())
            };
            numeric[i] = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        }
        errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(Report { errors })
}

/// Checks parameter gradients of `f`, which builds its output from the
/// parameters in the given store. For each trainable entry, `per_param`
/// randomly chosen coordinates (all of them for small entries) are compared.
pub fn check_params<F>(f: F, store: &ParamStore, per_param: usize, seed: u64, mode: Mode) -> Result<Report>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut proj: Option<Tensor> = None;
    let run = |store: &ParamStore, proj: &mut Option<Tensor>| -> Result<(Graph, Var)> {
        let mut g = Graph::new(mode, seed);
        let out = f(&mut g, store)?;
        let p = proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let n = g.value(out).len();
            Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
        });
        let pv = g.constant(p.clone())?;
        let prod = g.mul(out, pv)?;
        let loss = g.sum(prod)?;
        Ok((g, loss))
    };
    let (mut g, loss) = run(store, &mut proj)?;
    let grads = g.backward(loss)?.for_store(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut errors = Vec::new();
    let mut moved = store.clone();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = store.get(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                moved.get_mut(id).data_mut()[i] = orig + delta;
                let (g, loss) = run(&moved, &mut proj)?;
                Ok(g.value(loss).item())
            };
            let d = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            moved.get_mut(id).data_mut()[i] = orig;
            analytic.push(grads[id.index()].data()[i]);
            numeric.push(d);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(Report { errors })
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn assert_passes<F>(name: &str, f: F, inputs: &[Tensor], mode: Mode)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let r = check(f, inputs, 7, mode).unwrap();
        assert!(r.passes(), "{name}: relative errors {:?}", r.errors);
    }

    #[test]
    fn elementwise() {
        let a = rand_tensor(&[3, 4], 1, -2.0, 2.0);
        let b = rand_tensor(&[3, 4], 2, -2.0, 2.0);
        assert_passes("add", |g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()], Mode::Eval);
        assert_passes("sub", |g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()], Mode::Eval);
        assert_passes("mul", |g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()], Mode::Eval);
        assert_passes("scale", |g, v| g.scale(v[0], -1.7), &[a.clone()], Mode::Eval);
        assert_passes("elu", |g, v| g.elu(v[0]), &[a.clone()], Mode::Eval);
        assert_passes("sigmoid", |g, v| g.sigmoid(v[0]), &[a.clone()], Mode::Eval);
        assert_passes("tanh", |g, v| g.tanh(v[0]), &[a.clone()], Mode::Eval);
        let pos = rand_tensor(&[3, 4], 3, 0.1, 3.0);
        assert_passes("log1p", |g, v| g.log1p(v[0]), &[pos], Mode::Eval);
        // keep away from the kink at zero
        let away = Tensor::new(vec![4], vec![-1.5, -0.3, 0.4, 2.0]).unwrap();
        assert_passes("abs", |g, v| g.abs(v[0]), &[away], Mode::Eval);
        assert_passes("sum", |g, v| g.sum(v[0]), &[a], Mode::Eval);
    }

    #[test]
    fn dense_and_shapes() {
        let x = rand_tensor(&[2, 3, 5], 4, -1.0, 1.0);
        let w = rand_tensor(&[5, 4], 5, -1.0, 1.0);
        let b = rand_tensor(&[4], 6, -1.0, 1.0);
        assert_passes("dense", |g, v| g.dense(v[0], v[1], Some(v[2])), &[x.clone(), w, b], Mode::Eval);
        let y = rand_tensor(&[2, 3, 2], 7, -1.0, 1.0);
        assert_passes("concat", |g, v| g.concat(&[v[0], v[1]]), &[x.clone(), y], Mode::Eval);
        assert_passes("reshape", |g, v| g.reshape(v[0], &[6, 5]), &[x.clone()], Mode::Eval);
        assert_passes("permute", |g, v| g.permute(v[0], &[2, 0, 1]), &[x.clone()], Mode::Eval);
        assert_passes("slice_last", |g, v| g.slice_last(v[0], 1, 3), &[x.clone()], Mode::Eval);
        assert_passes(
            "select/stack",
            |g, v| {
                let a = g.select_time(v[0], 2)?;
                let b = g.select_time(v[0], 0)?;
                g.stack_time(&[a, b, a])
            },
            &[x],
            Mode::Eval,
        );
    }

    #[test]
    fn convolutions() {
        let x = rand_tensor(&[2, 2, 4, 9], 8, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, 2, 3], 9, -1.0, 1.0);
        let b = rand_tensor(&[3], 10, -1.0, 1.0);
        assert_passes("conv2d", |g, v| g.conv2d(v[0], v[1], v[2], 2), &[x.clone(), w, b.clone()], Mode::Eval);
        let w1 = rand_tensor(&[3, 2, 1, 3], 11, -1.0, 1.0);
        assert_passes("conv2d kt=1", |g, v| g.conv2d(v[0], v[1], v[2], 1), &[x.clone(), w1, b.clone()], Mode::Eval);
        let wt = rand_tensor(&[2, 3, 1, 5], 12, -1.0, 1.0);
        assert_passes(
            "conv_transpose2d",
            |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2),
            &[x, wt, b],
            Mode::Eval,
        );
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 3, 7], 13, -1.0, 1.0);
        let w = rand_tensor(&[2, 2, 2, 3], 14, -1.0, 1.0);
        let b = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let mut g = Graph::eval();
        let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = g.conv2d(xv, wv, bv, 2).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        for co in 0..2 {
            for t in 0..3 {
                for fo in 0..3 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for dt in 0..2 {
                            let ts = t as isize + dt as isize - 1;
                            if ts < 0 {
                                continue;
                            }
                            for df in 0..3 {
                                s += w.data()[((co * 2 + ci) * 2 + dt) * 3 + df]
                                    * x.data()[(ci * 3 + ts as usize) * 7 + fo * 2 + df];
                            }
                        }
                    }
                    let got = y.data()[(co * 3 + t) * 3 + fo];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 2, 4], 15, -1.0, 1.0);
        let w = rand_tensor(&[2, 3, 1, 5], 16, -1.0, 1.0);
        let b = Tensor::zeros(vec![3]);
        let mut g = Graph::eval();
        let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b).unwrap());
        let y = g.conv_transpose2d(xv, wv, bv, 2).unwrap();
        let y = g.value(y).clone();
        assert_eq!(y.shape(), &[1, 3, 2, 11]);
        let mut expect = vec![0.0; 3 * 2 * 11];
        for ci in 0..2 {
            for co in 0..3 {
                for t in 0..2 {
                    for f in 0..4 {
                        for df in 0..5 {
                            expect[(co * 2 + t) * 11 + f * 2 + df] +=
                                x.data()[(ci * 2 + t) * 4 + f] * w.data()[(ci * 3 + co) * 5 + df];
                        }
                    }
                }
            }
        }
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_both_modes() {
        let x = rand_tensor(&[3, 2, 4], 17, -1.0, 2.0);
        let gamma = rand_tensor(&[2], 18, 0.5, 1.5);
        let beta = rand_tensor(&[2], 19, -0.5, 0.5);
        let rm = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let rv = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            assert_passes(
                "batchnorm",
                |g, v| Ok(g.batchnorm(v[0], v[1], v[2], 1, (&rm, &rv), 1e-5)?.0),
                &[x.clone(), gamma.clone(), beta.clone()],
                mode,
            );
        }
    }

    #[test]
    fn batchnorm_train_normalises() {
        let x = rand_tensor(&[4, 3, 5], 20, -3.0, 5.0);
        let mut g = Graph::new(Mode::Train, 0);
        let xv = g.constant(x).unwrap();
        let one = g.constant(Tensor::full(vec![3], 1.0)).unwrap();
        let zero = g.constant(Tensor::zeros(vec![3])).unwrap();
        let (rm, rv) = (Tensor::zeros(vec![3]), Tensor::full(vec![3], 1.0));
        let (y, stats) = g.batchnorm(xv, one, zero, 1, (&rm, &rv), 0.0).unwrap();
        assert!(stats.is_some());
        let y = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|o| y[(o * 3 + ch) * 5..(o * 3 + ch + 1) * 5].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 20.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_in_training() {
        let x = rand_tensor(&[4, 6], 21, -1.0, 1.0);
        assert_passes("dropout", |g, v| g.dropout(v[0], 0.25), &[x], Mode::Train);
    }

    #[test]
    fn dropout_keeps_expected_scale() {
        let mut g = Graph::new(Mode::Train, 3);
        let x = g.constant(Tensor::full(vec![20000], 1.0)).unwrap();
        let y = g.dropout(x, 0.25).unwrap();
        let d = g.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        assert!((zeros - 0.25).abs() < 0.02);
        assert!(d.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn recurrent_cells() {
        let (b, h) = (2, 3);
        let xw = rand_tensor(&[b, 3 * h], 22, -1.0, 1.0);
        let h0 = rand_tensor(&[b, h], 23, -1.0, 1.0);
        let whh = rand_tensor(&[h, 3 * h], 24, -1.0, 1.0);
        let bhh = rand_tensor(&[3 * h], 25, -1.0, 1.0);
        assert_passes(
            "gru_step",
            |g, v| {
                let h1 = g.gru_step(v[0], v[1], v[2], v[3])?;
                g.gru_step(v[0], h1, v[2], v[3])
            },
            &[xw, h0, whh, bhh],
            Mode::Eval,
        );
        let xw = rand_tensor(&[b, 4 * h], 26, -1.0, 1.0);
        let s0 = rand_tensor(&[b, 2 * h], 27, -1.0, 1.0);
        let whh = rand_tensor(&[h, 4 * h], 28, -1.0, 1.0);
        assert_passes(
            "lstm_step",
            |g, v| {
                let s1 = g.lstm_step(v[0], v[1], v[2])?;
                g.lstm_step(v[0], s1, v[2])
            },
            &[xw, s0, whh],
            Mode::Eval,
        );
    }

    #[test]
    fn gru_matches_scalar_reference() {
        // H = 1, B = 1: every product is a scalar
        let (xr, xz, xn) = (0.3, -0.4, 0.8);
        let (wr, wz, wn) = (0.5, -0.6, 0.7);
        let (br, bz, bn) = (0.1, 0.2, -0.3);
        let h = 0.25;
        let mut g = Graph::eval();
        let xw = g.constant(Tensor::new(vec![1, 3], vec![xr, xz, xn]).unwrap()).unwrap();
        let hv = g.constant(Tensor::new(vec![1, 1], vec![h]).unwrap()).unwrap();
        let w = g.constant(Tensor::new(vec![1, 3], vec![wr, wz, wn]).unwrap()).unwrap();
        let bb = g.constant(Tensor::new(vec![3], vec![br, bz, bn]).unwrap()).unwrap();
        let out = g.gru_step(xw, hv, w, bb).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = s(xr + wr * h + br);
        let z = s(xz + wz * h + bz);
        let n = (xn + r * (wn * h + bn)).tanh();
        let expect = (1.0 - z) * n + z * h;
        assert!((g.value(out).item() - expect).abs() < 1e-14);
    }
}
