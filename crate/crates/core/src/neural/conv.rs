//! 3D convolutions: stride-1 zero-padded convolution (kernel 3 "same" and
//! kernel 1 pointwise) and the stride-2 kernel-2 transposed convolution used
//! for decoder upsampling.
//!
//! Work is split across rayon tasks by output channel block; every output
//! element is written by exactly one task in a fixed order, so results are
//! bitwise reproducible.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Lane-split dot product; the fixed 8-way split lets the compiler vectorize
/// while keeping the summation order deterministic.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Output positions `o` along an axis of length `n` for which the input
/// position `o + k - pad` is in range.
#[inline]
fn valid(n: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

fn check_stride1<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, k: usize) -> Result<([usize; 5], usize)> {
    let dims = input.dims5()?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != k || ws[3] != k || ws[4] != k {
        return Err(Error::usage(format!(
            "expected a Cout x Cin x {k} x {k} x {k} kernel, got {ws:?}"
        )));
    }
    if ws[1] != dims[1] {
        return Err(Error::usage(format!(
            "kernel expects {} input channels, input has {}",
            ws[1], dims[1]
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::usage(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            ws[0]
        )));
    }
    Ok((dims, ws[0]))
}

fn conv_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let ([n, cin, dd, hh, ww], cout) = check_stride1(input, weight, bias, k)?;
    let pad = k / 2;
    let vol = dd * hh * ww;
    let k3 = k * k * k;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); n * cout * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(idx, out_c)| {
        let (ni, co) = (idx / cout, idx % cout);
        out_c.fill(b[co]);
        for ci in 0..cin {
            let in_c = &x[(ni * cin + ci) * vol..][..vol];
            let wk = &wt[(co * cin + ci) * k3..][..k3];
            for kd in 0..k {
                let (d0, d1) = valid(dd, kd, pad);
                for d in d0..d1 {
                    let id = d + kd - pad;
                    for kh in 0..k {
                        let (h0, h1) = valid(hh, kh, pad);
                        for h in h0..h1 {
                            let ih = h + kh - pad;
                            let orow = &mut out_c[(d * hh + h) * ww..][..ww];
                            let irow = &in_c[(id * hh + ih) * ww..][..ww];
                            for kw in 0..k {
                                let (w0, w1) = valid(ww, kw, pad);
                                let wv = wk[(kd * k + kh) * k + kw];
                                axpy(&mut orow[w0..w1], wv, &irow[w0 + kw - pad..w1 + kw - pad]);
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, cout, dd, hh, ww], out))
}

fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
) -> Result<ConvGrads<T>> {
    let [n, cin, dd, hh, ww] = input.dims5()?;
    let cout = weight.shape()[0];
    if grad_out.shape() != [n, cout, dd, hh, ww] {
        return Err(Error::usage(format!(
            "output gradient shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            [n, cout, dd, hh, ww]
        )));
    }
    let pad = k / 2;
    let vol = dd * hh * ww;
    let k3 = k * k * k;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    let mut gin = vec![T::zero(); n * cin * vol];
    gin.par_chunks_mut(vol).enumerate().for_each(|(idx, gin_c)| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g_c = &g[(ni * cout + co) * vol..][..vol];
            let wk = &wt[(co * cin + ci) * k3..][..k3];
            for kd in 0..k {
                let (d0, d1) = valid(dd, kd, pad);
                for d in d0..d1 {
                    let id = d + kd - pad;
                    for kh in 0..k {
                        let (h0, h1) = valid(hh, kh, pad);
                        for h in h0..h1 {
                            let ih = h + kh - pad;
                            let grow = &g_c[(d * hh + h) * ww..][..ww];
                            let irow = &mut gin_c[(id * hh + ih) * ww..][..ww];
                            for kw in 0..k {
                                let (w0, w1) = valid(ww, kw, pad);
                                let wv = wk[(kd * k + kh) * k + kw];
                                axpy(&mut irow[w0 + kw - pad..w1 + kw - pad], wv, &grow[w0..w1]);
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![T::zero(); cout * cin * k3];
    gw.par_chunks_mut(k3).enumerate().for_each(|(idx, gk)| {
        let (co, ci) = (idx / cin, idx % cin);
        for ni in 0..n {
            let g_c = &g[(ni * cout + co) * vol..][..vol];
            let in_c = &x[(ni * cin + ci) * vol..][..vol];
            for kd in 0..k {
                let (d0, d1) = valid(dd, kd, pad);
                for kh in 0..k {
                    let (h0, h1) = valid(hh, kh, pad);
                    for kw in 0..k {
                        let (w0, w1) = valid(ww, kw, pad);
                        let mut acc = T::zero();
                        for d in d0..d1 {
                            let id = d + kd - pad;
                            for h in h0..h1 {
                                let ih = h + kh - pad;
                                let grow = &g_c[(d * hh + h) * ww..][w0..w1];
                                let irow = &in_c[(id * hh + ih) * ww..][w0 + kw - pad..w1 + kw - pad];
                                acc += dot(grow, irow);
                            }
                        }
                        gk[(kd * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });

    let gb: Vec<T> = (0..cout)
        .map(|co| {
            (0..n)
                .map(|ni| g[(ni * cout + co) * vol..][..vol].iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::from_parts(vec![n, cin, dd, hh, ww], gin),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![cout], gb),
    })
}

/// 3x3x3 convolution with one voxel of zero padding; spatial size is preserved.
pub fn conv3d_same<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_forward(input, weight, bias, 3)
}

pub fn conv3d_same_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv_backward(input, weight, grad_out, 3)
}

/// Pointwise (1x1x1) convolution: a per-voxel linear map across channels.
pub fn conv3d_1x1<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_forward(input, weight, bias, 1)
}

pub fn conv3d_1x1_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv_backward(input, weight, grad_out, 1)
}

fn check_upconv<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<([usize; 5], usize)> {
    let dims = input.dims5()?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2..] != [2, 2, 2] {
        return Err(Error::usage(format!("expected a Cin x Cout x 2 x 2 x 2 kernel, got {ws:?}")));
    }
    if ws[0] != dims[1] {
        return Err(Error::usage(format!(
            "kernel expects {} input channels, input has {}",
            ws[0], dims[1]
        )));
    }
    if bias.shape() != [ws[1]] {
        return Err(Error::usage(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            ws[1]
        )));
    }
    Ok((dims, ws[1]))
}

/// Transposed convolution with kernel 2, stride 2 and no padding: every input
/// voxel expands into a 2x2x2 output block, doubling each spatial dimension.
/// The kernel is laid out `Cin x Cout x 2 x 2 x 2`.
pub fn upconv3d_2<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ([n, cin, dd, hh, ww], cout) = check_upconv(input, weight, bias)?;
    let (od, oh, ow) = (2 * dd, 2 * hh, 2 * ww);
    let ivol = dd * hh * ww;
    let ovol = od * oh * ow;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); n * cout * ovol];
    out.par_chunks_mut(ovol).enumerate().for_each(|(idx, out_c)| {
        let (ni, co) = (idx / cout, idx % cout);
        out_c.fill(b[co]);
        for ci in 0..cin {
            let in_c = &x[(ni * cin + ci) * ivol..][..ivol];
            let wk = &wt[(ci * cout + co) * 8..][..8];
            for d in 0..dd {
                for h in 0..hh {
                    let irow = &in_c[(d * hh + h) * ww..][..ww];
                    for a in 0..2 {
                        for bb in 0..2 {
                            let orow = &mut out_c[((2 * d + a) * oh + 2 * h + bb) * ow..][..ow];
                            let w0 = wk[(a * 2 + bb) * 2];
                            let w1 = wk[(a * 2 + bb) * 2 + 1];
                            for (pair, &xv) in orow.chunks_exact_mut(2).zip(irow) {
                                pair[0] += w0 * xv;
                                pair[1] += w1 * xv;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, cout, od, oh, ow], out))
}

pub fn upconv3d_2_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, cin, dd, hh, ww] = input.dims5()?;
    let cout = weight.shape()[1];
    let (od, oh, ow) = (2 * dd, 2 * hh, 2 * ww);
    if grad_out.shape() != [n, cout, od, oh, ow] {
        return Err(Error::usage(format!(
            "output gradient shape {:?} does not match upsampled shape {:?}",
            grad_out.shape(),
            [n, cout, od, oh, ow]
        )));
    }
    let ivol = dd * hh * ww;
    let ovol = od * oh * ow;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    let mut gin = vec![T::zero(); n * cin * ivol];
    gin.par_chunks_mut(ivol).enumerate().for_each(|(idx, gin_c)| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g_c = &g[(ni * cout + co) * ovol..][..ovol];
            let wk = &wt[(ci * cout + co) * 8..][..8];
            for d in 0..dd {
                for h in 0..hh {
                    let irow = &mut gin_c[(d * hh + h) * ww..][..ww];
                    for a in 0..2 {
                        for bb in 0..2 {
                            let grow = &g_c[((2 * d + a) * oh + 2 * h + bb) * ow..][..ow];
                            let w0 = wk[(a * 2 + bb) * 2];
                            let w1 = wk[(a * 2 + bb) * 2 + 1];
                            for (gi, pair) in irow.iter_mut().zip(grow.chunks_exact(2)) {
                                *gi += w0 * pair[0] + w1 * pair[1];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![T::zero(); cin * cout * 8];
    gw.par_chunks_mut(8).enumerate().for_each(|(idx, gk)| {
        let (ci, co) = (idx / cout, idx % cout);
        for ni in 0..n {
            let in_c = &x[(ni * cin + ci) * ivol..][..ivol];
            let g_c = &g[(ni * cout + co) * ovol..][..ovol];
            for d in 0..dd {
                for h in 0..hh {
                    let irow = &in_c[(d * hh + h) * ww..][..ww];
                    for a in 0..2 {
                        for bb in 0..2 {
                            let grow = &g_c[((2 * d + a) * oh + 2 * h + bb) * ow..][..ow];
                            let (mut s0, mut s1) = (T::zero(), T::zero());
                            for (&xv, pair) in irow.iter().zip(grow.chunks_exact(2)) {
                                s0 += xv * pair[0];
                                s1 += xv * pair[1];
                            }
                            gk[(a * 2 + bb) * 2] += s0;
                            gk[(a * 2 + bb) * 2 + 1] += s1;
                        }
                    }
                }
            }
        }
    });

    let gb: Vec<T> = (0..cout)
        .map(|co| {
            (0..n)
                .map(|ni| g[(ni * cout + co) * ovol..][..ovol].iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::from_parts(vec![n, cin, dd, hh, ww], gin),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![cout], gb),
    })
}
