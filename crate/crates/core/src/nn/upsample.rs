//! Bilinear upsampling by an integer factor, half-pixel (align-corners
//! false) sampling with edge clamping.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source taps `(i0, i1, weight_of_i1)` for every output coordinate.
fn taps(in_size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_size * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

fn check(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    Ok(())
}

pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check(factor)?;
    let (c, h, w) = input.chw()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let x = input.data();
    let o = out.data_mut();
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                o[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Exact transpose of [`bilinear_upsample`].
pub fn bilinear_upsample_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check(factor)?;
    let (c, oh, ow) = grad_out.chw()?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!(
            "upsample gradient {:?} is not a multiple of factor {factor}",
            grad_out.shape()
        )));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (h, w) = (oh / factor, ow / factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let g = grad_out.data();
    let d = dx.data_mut();
    for ch in 0..c {
        let dst = &mut d[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[(ch * oh + oy) * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Triangle-kernel formulation of half-pixel bilinear sampling,
    /// written independently of the tap table above.
    fn oracle_sample(row: &[f64], factor: usize, o: usize) -> f64 {
        let n = row.len() as f64;
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, n - 1.0);
        row.iter()
            .enumerate()
            .map(|(j, v)| v * (1.0 - (src - j as f64).abs()).max(0.0))
            .sum()
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f32>::from_vec(&[2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::filled(&[1, 3, 5], 2.5);
        for f in 1..5 {
            let y = bilinear_upsample(&x, f).unwrap();
            assert_eq!(y.shape(), &[1, 3 * f, 5 * f]);
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn two_by_two_horizontal_ramp() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = oracle_sample(&[0.0, 1.0], 2, ox);
                assert!((y.at(0, oy, ox) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(
            (0..4).map(|ox| y.at(0, 0, ox)).collect::<Vec<_>>(),
            vec![0.0, 0.25, 0.75, 1.0]
        );
    }

    #[test]
    fn zero_factor_rejected() {
        assert!(bilinear_upsample(&Tensor::<f32>::zeros(&[1, 2, 2]), 0).is_err());
    }

    proptest! {
        #[test]
        fn matches_separable_oracle(h in 1usize..5, w in 1usize..5, f in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..h * w).map(|i| ((i as u64 ^ seed) % 97) as f64 / 13.0).collect();
            let x = Tensor::from_vec(&[1, h, w], data.clone()).unwrap();
            let y = bilinear_upsample(&x, f).unwrap();
            for oy in 0..h * f {
                let col: Vec<f64> = (0..w)
                    .map(|ix| {
                        let column: Vec<f64> = (0..h).map(|iy| data[iy * w + ix]).collect();
                        oracle_sample(&column, f, oy)
                    })
                    .collect();
                for ox in 0..w * f {
                    prop_assert!((y.at(0, oy, ox) - oracle_sample(&col, f, ox)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn backward_is_adjoint(c in 1usize..3, h in 1usize..5, w in 1usize..5, f in 1usize..5) {
            let x = Tensor::<f64>::from_vec(&[c, h, w], (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let up = bilinear_upsample(&x, f).unwrap();
            let y = up.map(|v| v * 0.0 + 1.0);
            let y = Tensor::from_vec(y.shape(), (0..y.len()).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
            let lhs = up.dot(&y);
            let rhs = x.dot(&bilinear_upsample_backward(&y, f).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1e-12) + 1e-12);
        }
    }
}
