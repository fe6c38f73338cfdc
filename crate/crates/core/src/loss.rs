//! IAM-weighted mean absolute logarithmic error.
//!
//! ```text
//! M(t,f) = (X(t,f) / (Y(t,f) + 1e-8))^γ       ideal amplitude mask
//! W(t,f) = exp(a / (b + M(t,f)))              per-bin weight
//! L      = Σ_t Σ_f W(t,f) |ln(X'(t,f) + 1) - ln(X(t,f) + 1)|
//! ```
//!
//! `X` is the clean magnitude, `Y` the noisy magnitude and `X'` the
//! prediction. The weight depends only on `X` and `Y`, so it is a constant
//! with respect to the prediction. Low-SNR bins (small `M`) get larger
//! weights.

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Guard on the noisy magnitude in the mask ratio.
pub const IAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IamLossParams {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for IamLossParams {
    fn default() -> Self {
        Self { gamma: 1.0, a: 2.0, b: 1.0 }
    }
}

impl IamLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.a.is_finite() && self.b > 0.0) {
            return Err(Error::Config(format!(
                "loss parameters need gamma > 0 and b > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_nonneg(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} magnitude {x} is not a finite non-negative value")));
    }
    Ok(())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("magnitude sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `(x / (y + ε))^γ` elementwise.
pub fn ideal_amplitude_mask(clean: &[f64], noisy: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_len(clean, noisy)?;
    check_nonneg(clean, "clean")?;
    check_nonneg(noisy, "noisy")?;
    Ok(clean.iter().zip(noisy).map(|(x, y)| (x / (y + IAM_EPS)).powf(gamma)).collect())
}

/// `exp(a / (b + m))` elementwise.
pub fn iam_weight(mask: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    check_nonneg(mask, "mask")?;
    Ok(mask.iter().map(|m| (a / (b + m)).exp()).collect())
}

/// Loss weights for a clean/noisy pair.
pub fn loss_weights(clean: &[f64], noisy: &[f64], params: &IamLossParams) -> Result<Vec<f64>> {
    params.validate()?;
    let m = ideal_amplitude_mask(clean, noisy, params.gamma)?;
    iam_weight(&m, params.a, params.b)
}

/// Scalar loss over flat magnitude arrays of equal size.
pub fn iam_male_loss(pred: &[f64], clean: &[f64], noisy: &[f64], params: &IamLossParams) -> Result<f64> {
    check_len(pred, clean)?;
    check_nonneg(pred, "predicted")?;
    let w = loss_weights(clean, noisy, params)?;
    Ok(weighted_male(pred, clean, &w))
}

/// `Σ w |ln(p + 1) - ln(x + 1)|`.
pub fn weighted_male(pred: &[f64], clean: &[f64], weights: &[f64]) -> f64 {
    pred.iter()
        .zip(clean)
        .zip(weights)
        .map(|((p, x), w)| w * (p.ln_1p() - x.ln_1p()).abs())
        .sum()
}

/// The loss as a graph node. `pred` must have the shape of `clean` and
/// `noisy`; with `batch > 1` the sum is divided by the batch size.
pub fn iam_male_graph(
    g: &mut Graph,
    pred: Var,
    clean: &Tensor,
    noisy: &Tensor,
    params: &IamLossParams,
    batch: usize,
) -> Result<Var> {
    if g.shape(pred) != clean.shape() || clean.shape() != noisy.shape() {
        return Err(Error::Shape(format!(
            "loss shapes: prediction {:?}, clean {:?}, noisy {:?}",
            g.shape(pred),
            clean.shape(),
            noisy.shape()
        )));
    }
    let w = loss_weights(clean.data(), noisy.data(), params)?;
    let w = g.constant(Tensor::new(clean.shape().to_vec(), w)?)?;
    let target = Tensor::new(clean.shape().to_vec(), clean.data().iter().map(|x| x.ln_1p()).collect())?;
    let target = g.constant(target)?;
    let lp = g.log1p(pred)?;
    let d = g.sub(lp, target)?;
    let d = g.abs(d)?;
    let d = g.mul(d, w)?;
    let s = g.sum(d)?;
    if batch > 1 {
        g.scale(s, 1.0 / batch as f64)
    } else {
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Mode};
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn mask_values() {
        assert_eq!(ideal_amplitude_mask(&[2.0], &[4.0], 1.0).unwrap()[0], 2.0 / (4.0 + 1e-8));
        assert!((ideal_amplitude_mask(&[2.0], &[4.0], 1.0).unwrap()[0] - 0.5).abs() < 1e-8);
        assert_eq!(ideal_amplitude_mask(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap(), [0.0, 0.0]);
        let m = ideal_amplitude_mask(&[3.0, 0.7], &[3.0, 0.7], 1.0).unwrap();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-7));
        assert!(ideal_amplitude_mask(&[-1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn weight_values() {
        let w = iam_weight(&[1.0, 0.0, 1e12], 2.0, 1.0).unwrap();
        assert!((w[0] - E).abs() < 1e-9);
        assert!((w[1] - E * E).abs() < 1e-9);
        assert!((w[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_bin_hand_value() {
        let l = iam_male_loss(&[E - 1.0], &[0.0], &[1.0], &IamLossParams::default()).unwrap();
        assert!((l - E * E).abs() < 1e-9);
    }

    #[test]
    fn loss_errors() {
        let p = IamLossParams::default();
        assert!(matches!(iam_male_loss(&[1.0], &[1.0, 2.0], &[1.0, 2.0], &p), Err(Error::Shape(_))));
        assert!(matches!(iam_male_loss(&[-1.0], &[1.0], &[1.0], &p), Err(Error::InvalidInput(_))));
        let bad = IamLossParams { b: 0.0, ..p };
        assert!(iam_male_loss(&[1.0], &[1.0], &[1.0], &bad).is_err());
    }

    #[test]
    fn graph_loss_matches_and_differentiates() {
        let clean = Tensor::new(vec![2, 3], vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.3]).unwrap();
        let noisy = Tensor::new(vec![2, 3], vec![1.0, 1.5, 0.4, 2.2, 0.9, 0.3]).unwrap();
        let pred = Tensor::new(vec![2, 3], vec![0.7, 0.8, 0.2, 1.5, 0.4, 0.6]).unwrap();
        let p = IamLossParams::default();
        let mut g = Graph::eval();
        let pv = g.constant(pred.clone()).unwrap();
        let l = iam_male_graph(&mut g, pv, &clean, &noisy, &p, 1).unwrap();
        let direct = iam_male_loss(pred.data(), clean.data(), noisy.data(), &p).unwrap();
        assert!((g.value(l).item() - direct).abs() < 1e-12);
        let r = gradcheck::check(
            |g, v| iam_male_graph(g, v[0], &clean, &noisy, &p, 2),
            &[pred],
            3,
            Mode::Eval,
        )
        .unwrap();
        assert!(r.passes(), "{:?}", r.errors);
    }

    proptest! {
        #[test]
        fn weight_strictly_decreasing(m1 in 0.0f64..50.0, dm in 1e-6f64..50.0) {
            let w = iam_weight(&[m1, m1 + dm], 2.0, 1.0).unwrap();
            prop_assert!(w[0] > w[1]);
        }

        #[test]
        fn nonnegative_and_zero_iff_equal(
            v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0), 1..40)
        ) {
            let p = IamLossParams::default();
            let pred: Vec<f64> = v.iter().map(|t| t.0).collect();
            let clean: Vec<f64> = v.iter().map(|t| t.1).collect();
            let noisy: Vec<f64> = v.iter().map(|t| t.2).collect();
            let l = iam_male_loss(&pred, &clean, &noisy, &p).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(iam_male_loss(&clean, &clean, &noisy, &p).unwrap(), 0.0);
            if pred != clean {
                prop_assert!(l > 0.0);
            }
        }

        #[test]
        fn permutation_and_weight_linearity(
            v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0), 2..30),
            shift in 1usize..29,
        ) {
            let p = IamLossParams::default();
            let unzip = |v: &[(f64, f64, f64)]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                (v.iter().map(|t| t.0).collect(), v.iter().map(|t| t.1).collect(), v.iter().map(|t| t.2).collect())
            };
            let (a, b, c) = unzip(&v);
            let mut r = v.clone();
            r.rotate_left(shift % v.len());
            let (ra, rb, rc) = unzip(&r);
            let l1 = iam_male_loss(&a, &b, &c, &p).unwrap();
            let l2 = iam_male_loss(&ra, &rb, &rc, &p).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-9 * l1.max(1.0));
            let w = loss_weights(&b, &c, &p).unwrap();
            let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            prop_assert!((weighted_male(&a, &b, &w2) - 2.0 * weighted_male(&a, &b, &w)).abs() <= 1e-9 * l1.max(1.0));
        }
    }
}
