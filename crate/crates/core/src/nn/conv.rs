//! 2-D convolution (cross-correlation) with zero padding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (in_ch, h, w) = input.chw()?;
        let [out_ch, w_in, kh, kw] = weights.shape()[..] else {
            return Err(Error::Shape(format!(
                "conv weights must be (out, in, kh, kw), got {:?}",
                weights.shape()
            )));
        };
        if w_in != in_ch {
            return Err(Error::Shape(format!(
                "conv input {:?} has {} channels but weights {:?} expect {}",
                input.shape(),
                in_ch,
                weights.shape(),
                w_in
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv kernel {kh}x{kw} does not fit input {:?} with pad {pad}",
                input.shape()
            )));
        }
        Ok(Self {
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output index range `[lo, hi)` along one axis whose source coordinate
    /// `o * stride + k - pad` lands inside `[0, size)`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if size + p > k { (size + p - k).div_ceil(s).min(out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// `dst += a * src`.
#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

/// Dot product with eight independent partial sums (fixed summation
/// order, so results stay deterministic).
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

pub fn output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weights, stride, pad)?;
    if bias.len() != g.out_ch {
        return Err(Error::Shape(format!(
            "conv bias has {} entries for {} output channels",
            bias.len(),
            g.out_ch
        )));
    }
    let mut out = Tensor::zeros(&[g.out_ch, g.oh, g.ow]);
    let x = input.data();
    let wt = weights.data();
    let plane = g.oh * g.ow;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(o, dst)| {
            dst.fill(bias[o]);
            for i in 0..g.in_ch {
                let src = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((o * g.in_ch + i) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x_lo, x_hi) = g.valid_range(kx, g.w, g.ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let shift = x_lo + kx - g.pad;
                                axpy(&mut drow[x_lo..x_hi], &row[shift..shift + x_hi - x_lo], wv);
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    drow[ox] = drow[ox] + wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, weights, stride, pad)?;
    if grad_out.shape() != [g.out_ch, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match expected {:?}",
            grad_out.shape(),
            [g.out_ch, g.oh, g.ow]
        )));
    }
    let x = input.data();
    let wt = weights.data();
    let dy = grad_out.data();
    let plane = g.oh * g.ow;
    let k_per_out = g.in_ch * g.kh * g.kw;

    let mut d_bias = Tensor::zeros(&[g.out_ch]);
    for (o, b) in d_bias.data_mut().iter_mut().enumerate() {
        *b = dy[o * plane..(o + 1) * plane]
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
    }

    let mut d_weights = Tensor::zeros(weights.shape());
    d_weights
        .data_mut()
        .par_chunks_mut(k_per_out)
        .enumerate()
        .for_each(|(o, dw)| {
            let gy = &dy[o * plane..(o + 1) * plane];
            for i in 0..g.in_ch {
                let src = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x_lo, x_hi) = g.valid_range(kx, g.w, g.ow);
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let grow = &gy[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let shift = x_lo + kx - g.pad;
                                acc = acc + dot(&grow[x_lo..x_hi], &row[shift..shift + x_hi - x_lo]);
                            } else {
                                for ox in x_lo..x_hi {
                                    acc = acc + grow[ox] * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        dw[(i * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        });

    let mut d_input = Tensor::zeros(input.shape());
    d_input
        .data_mut()
        .par_chunks_mut(g.h * g.w)
        .enumerate()
        .for_each(|(i, dx)| {
            for o in 0..g.out_ch {
                let gy = &dy[o * plane..(o + 1) * plane];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((o * g.in_ch + i) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x_lo, x_hi) = g.valid_range(kx, g.w, g.ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gy[oy * g.ow..(oy + 1) * g.ow];
                            let drow = &mut dx[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let shift = x_lo + kx - g.pad;
                                axpy(&mut drow[shift..shift + x_hi - x_lo], &grow[x_lo..x_hi], wv);
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    drow[ix] = drow[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: d_input,
        weights: d_weights,
        bias: d_bias,
    })
}
