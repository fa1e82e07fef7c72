//! Two-class softmax cross-entropy summed over pixels.
//!
//! Channel [`TRIP`] holds the trip-hazard score, channel [`NON_TRIP`] the
//! background score.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TRIP: usize = 0;
pub const NON_TRIP: usize = 1;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Tensor<T>,
    /// Number of pixels that contributed to the loss.
    pub counted: usize,
    /// Set when every pixel was ignored; loss and gradient are then zero.
    pub all_ignored: bool,
}

/// Numerically stable two-class softmax; returns `(p_trip, p_non_trip)`.
pub fn softmax2<T: Real>(trip: T, non_trip: T) -> (T, T) {
    let m = trip.max(non_trip);
    let a = (trip - m).exp();
    let b = (non_trip - m).exp();
    let s = a + b;
    (a / s, b / s)
}

/// `ln(e^a + e^b)`.
pub fn logsumexp2<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn check_scores<T: Real>(scores: &Tensor<T>, mask_len: usize, what: &str) -> Result<usize> {
    let (c, h, w) = scores.chw()?;
    if c != 2 {
        return Err(Error::Shape(format!(
            "scores must have 2 channels, got {:?}",
            scores.shape()
        )));
    }
    if mask_len != h * w {
        return Err(Error::Shape(format!(
            "{what} has {mask_len} pixels but scores {:?} have {}",
            scores.shape(),
            h * w
        )));
    }
    Ok(h * w)
}

/// Summed per-pixel cross-entropy over non-ignored pixels. `target[i]` is
/// true where pixel `i` is a trip hazard.
pub fn softmax_xent_sum<T: Real>(
    scores: &Tensor<T>,
    target: &[bool],
    ignore: Option<&[bool]>,
) -> Result<LossOutput<T>> {
    let n = check_scores(scores, target.len(), "target")?;
    if let Some(ig) = ignore {
        check_scores(scores, ig.len(), "ignore mask")?;
    }
    let s = scores.data();
    let mut grad = Tensor::zeros(scores.shape());
    let g = grad.data_mut();
    let mut loss = T::zero();
    let mut counted = 0;
    for i in 0..n {
        if ignore.is_some_and(|ig| ig[i]) {
            continue;
        }
        let (st, sn) = (s[TRIP * n + i], s[NON_TRIP * n + i]);
        let lse = logsumexp2(st, sn);
        let (pt, pn) = softmax2(st, sn);
        if target[i] {
            loss = loss + (lse - st);
            g[TRIP * n + i] = pt - T::one();
            g[NON_TRIP * n + i] = pn;
        } else {
            loss = loss + (lse - sn);
            g[TRIP * n + i] = pt;
            g[NON_TRIP * n + i] = pn - T::one();
        }
        counted += 1;
    }
    Ok(LossOutput {
        loss,
        grad,
        counted,
        all_ignored: counted == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(pairs: &[(f64, f64)]) -> Tensor<f64> {
        let n = pairs.len();
        let mut d = vec![0.0; 2 * n];
        for (i, &(t, b)) in pairs.iter().enumerate() {
            d[i] = t;
            d[n + i] = b;
        }
        Tensor::from_vec(&[2, 1, n], d).unwrap()
    }

    #[test]
    fn uniform_single_pixel() {
        let out = softmax_xent_sum(&scores(&[(0.0, 0.0)]), &[true], None).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert!((out.loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn four_pixels_sum_not_mean() {
        let out = softmax_xent_sum(&scores(&[(0.0, 0.0); 4]), &[true, false, true, false], None).unwrap();
        assert!((out.loss - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn three_to_one_softmax() {
        let s = scores(&[(3f64.ln(), 0.0)]);
        let (pt, pn) = softmax2(s.data()[0], s.data()[1]);
        assert!((pt - 0.75).abs() < 1e-12 && (pn - 0.25).abs() < 1e-12);
        let out = softmax_xent_sum(&s, &[true], None).unwrap();
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.2877).abs() < 1e-4);
        assert!((out.grad.data()[0] + 0.25).abs() < 1e-12);
        assert!((out.grad.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_flagged() {
        let out = softmax_xent_sum(&scores(&[(1.0, 2.0); 3]), &[true; 3], Some(&[true; 3])).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ignored_pixels_have_zero_gradient() {
        let out = softmax_xent_sum(&scores(&[(1.0, 2.0), (0.5, -1.0)]), &[true, false], Some(&[false, true])).unwrap();
        assert_eq!(out.counted, 1);
        assert_eq!(out.grad.data()[1], 0.0);
        assert_eq!(out.grad.data()[3], 0.0);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let s = Tensor::<f64>::zeros(&[3, 1, 1]);
        assert!(softmax_xent_sum(&s, &[true], None).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(v in proptest::collection::vec((-30.0f64..30.0, -30.0f64..30.0, any::<bool>()), 1..20)) {
            let pairs: Vec<_> = v.iter().map(|&(a, b, _)| (a, b)).collect();
            let target: Vec<bool> = v.iter().map(|t| t.2).collect();
            let out = softmax_xent_sum(&scores(&pairs), &target, None).unwrap();
            prop_assert!(out.loss >= 0.0);
            prop_assert!(out.grad.is_finite());
        }
    }
}
