//! Max pooling. Ties resolve to the lowest linear input index.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Pooled tensor plus, per output cell, the linear index into the input
/// that supplied the maximum.
pub fn maxpool<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool kernel ({kernel}) and stride ({stride}) must be >= 1"
        )));
    }
    if h < kernel || w < kernel {
        return Err(Error::Shape(format!(
            "maxpool window {kernel}x{kernel} larger than input {:?}",
            input.shape()
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    let x = input.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = T::neg_infinity();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data_mut()[o] = best_v;
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool gradient {:?} does not match {} recorded windows",
            grad_out.shape(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}
