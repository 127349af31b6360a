//! Non-convolutional operators: max pooling, ReLU, channel concatenation
//! and the channel softmax.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Output of [`maxpool3d_2`]: the pooled tensor and, for each output element,
/// the flat input index that produced it.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2x2x2 max pooling. Ties resolve to the lowest linear index.
pub fn maxpool3d_2<T: Real>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let [n, c, dd, hh, ww] = input.dims5()?;
    if dd % 2 != 0 || hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::usage(format!(
            "max pooling needs even spatial dims, got {:?}",
            [dd, hh, ww]
        )));
    }
    let (od, oh, ow) = (dd / 2, hh / 2, ww / 2);
    let ivol = dd * hh * ww;
    let ovol = od * oh * ow;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * ovol];
    let mut arg = vec![0usize; n * c * ovol];
    out.par_chunks_mut(ovol)
        .zip(arg.par_chunks_mut(ovol))
        .enumerate()
        .for_each(|(nc, (out_c, arg_c))| {
            let base = nc * ivol;
            for d in 0..od {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut best_i = base + ((2 * d) * hh + 2 * h) * ww + 2 * w;
                        let mut best = x[best_i];
                        // window visited in increasing linear index order
                        for a in 0..2 {
                            for b in 0..2 {
                                for e in 0..2 {
                                    let i = base + ((2 * d + a) * hh + 2 * h + b) * ww + 2 * w + e;
                                    if x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (d * oh + h) * ow + w;
                        out_c[o] = best;
                        arg_c[o] = best_i;
                    }
                }
            }
        });
    Ok(Pooled {
        output: Tensor::from_parts(vec![n, c, od, oh, ow], out),
        argmax: arg,
    })
}

/// Routes each output gradient to the input element recorded in `argmax`.
pub fn maxpool3d_2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::usage("pooling indices do not match the output gradient"));
    }
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(gin)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::usage("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Stacks the channels of `a` followed by the channels of `b`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, da, ha, wa] = a.dims5()?;
    let [nb, cb, db, hb, wb] = b.dims5()?;
    if na != nb || [da, ha, wa] != [db, hb, wb] {
        return Err(Error::usage(format!(
            "cannot concatenate channels of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let vol = da * ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        data.extend_from_slice(&a.data()[ni * ca * vol..(ni + 1) * ca * vol]);
        data.extend_from_slice(&b.data()[ni * cb * vol..(ni + 1) * cb * vol]);
    }
    Ok(Tensor::from_parts(vec![na, ca + cb, da, ha, wa], data))
}

/// Splits a concatenated gradient back into the parts for `a` (first `ca`
/// channels) and `b` (the rest).
pub fn split_channels<T: Real>(grad: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = grad.dims5()?;
    if ca > c {
        return Err(Error::usage(format!("cannot split {ca} channels from {c}")));
    }
    let cb = c - ca;
    let vol = d * h * w;
    let mut ga = Vec::with_capacity(n * ca * vol);
    let mut gb = Vec::with_capacity(n * cb * vol);
    for ni in 0..n {
        let block = &grad.data()[ni * c * vol..(ni + 1) * c * vol];
        ga.extend_from_slice(&block[..ca * vol]);
        gb.extend_from_slice(&block[ca * vol..]);
    }
    Ok((
        Tensor::from_parts(vec![n, ca, d, h, w], ga),
        Tensor::from_parts(vec![n, cb, d, h, w], gb),
    ))
}

/// Per-voxel softmax over the channel axis, using the max-shifted form.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    let vol = d * h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let xs = &x[ni * c * vol..(ni + 1) * c * vol];
        let os = &mut out[ni * c * vol..(ni + 1) * c * vol];
        for v in 0..vol {
            let m = (0..c).map(|k| xs[k * vol + v]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (xs[k * vol + v] - m).exp();
                os[k * vol + v] = e;
                z += e;
            }
            for k in 0..c {
                os[k * vol + v] = os[k * vol + v] / z;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, d, h, w], out))
}

/// Gradient of the channel softmax given its output `probs`:
/// `g_in = p * (g - sum_k g_k p_k)` per voxel.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = probs.dims5()?;
    if grad_out.shape() != probs.shape() {
        return Err(Error::usage("softmax gradient shape mismatch"));
    }
    let vol = d * h * w;
    let p = probs.data();
    let g = grad_out.data();
    let mut out = vec![T::zero(); p.len()];
    for ni in 0..n {
        let base = ni * c * vol;
        for v in 0..vol {
            let s: T = (0..c).map(|k| g[base + k * vol + v] * p[base + k * vol + v]).sum();
            for k in 0..c {
                let i = base + k * vol + v;
                out[i] = p[i] * (g[i] - s);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, d, h, w], out))
}
