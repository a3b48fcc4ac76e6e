//! Convolution kernels: plain 2-D cross-correlation and its locally masked
//! variant, with the adjoint passes used by the differentiation record.
//!
//! All convolutions keep the spatial extent ("same" padding,
//! pad = dilation * (k-1) / 2 per side) and require an odd kernel.

use crate::error::{Error, Result};
use crate::masking::LocalMaskSet;
use crate::tensor::{Real, Tensor};

pub fn validate_conv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<()> {
    if input.shape().len() != 3 || weight.shape().len() != 4 || bias.shape().len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects input [C,H,W], weight [Co,Ci,k,k], bias [Co]; got {:?}, {:?}, {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let k = weight.shape()[2];
    if k != weight.shape()[3] || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel must be square and odd, got {}x{}",
            weight.shape()[2],
            weight.shape()[3]
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv2d dilation must be >= 1".into(),
        ));
    }
    if weight.shape()[1] != input.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight expects {} input channels, input has {}",
            weight.shape()[1],
            input.shape()[0]
        )));
    }
    if bias.shape()[0] != weight.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias has {} channels, weight produces {}",
            bias.shape()[0],
            weight.shape()[0]
        )));
    }
    Ok(())
}

/// Plain same-padding cross-correlation. Checked entry point; the layers in
/// the network builders validate shapes once and then use the kernels below.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    validate_conv(input, weight, bias, dilation)?;
    Ok(conv2d_forward(input, weight, bias, dilation))
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Tensor<T> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    // single-position grids degenerate to a matvec over the center tap;
    // the models run most of their convolutions on such grids
    if h == 1 && w == 1 {
        let x = input.data();
        let wt = weight.data();
        let center = (k / 2) * k + k / 2;
        let kk = k * k;
        let out = (0..co)
            .map(|oc| {
                let mut acc = bias.data()[oc];
                let wrow = &wt[oc * ci * kk..];
                for (icn, &xv) in x.iter().enumerate() {
                    acc = acc + wrow[icn * kk + center] * xv;
                }
                acc
            })
            .collect();
        return Tensor::from_vec(&[co, 1, 1], out);
    }
    let r = (k / 2) as isize;
    let d = dilation as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); co * h * w];
    for oc in 0..co {
        let b = bias.data()[oc];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = b;
                for icn in 0..ci {
                    let wbase = ((oc * ci) + icn) * k * k;
                    let xbase = icn * h * w;
                    for a in 0..k as isize {
                        let yy = y + d * (a - r);
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for bb in 0..k as isize {
                            let xs = xx + d * (bb - r);
                            if xs < 0 || xs >= w as isize {
                                continue;
                            }
                            acc = acc
                                + wt[wbase + (a * k as isize + bb) as usize]
                                    * x[xbase + (yy * w as isize + xs) as usize];
                        }
                    }
                }
                out[(oc * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    Tensor::from_vec(&[co, h, w], out)
}

/// Adjoints of [`conv2d_forward`]: gradients w.r.t. input, weight and bias.
pub(crate) fn conv2d_vjp<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    if h == 1 && w == 1 {
        let g = upstream.data();
        let x = input.data();
        let wt = weight.data();
        let center = (k / 2) * k + k / 2;
        let kk = k * k;
        let mut din = vec![T::zero(); ci];
        let mut dw = vec![T::zero(); co * ci * kk];
        for oc in 0..co {
            let up = g[oc];
            let wrow = &wt[oc * ci * kk..(oc + 1) * ci * kk];
            let drow = &mut dw[oc * ci * kk..(oc + 1) * ci * kk];
            for icn in 0..ci {
                din[icn] = din[icn] + wrow[icn * kk + center] * up;
                drow[icn * kk + center] = x[icn] * up;
            }
        }
        return (
            Tensor::from_vec(input.shape(), din),
            Tensor::from_vec(weight.shape(), dw),
            Tensor::from_vec(&[co], g.to_vec()),
        );
    }
    let r = (k / 2) as isize;
    let d = dilation as isize;
    let g = upstream.data();
    let x = input.data();
    let wt = weight.data();
    let mut din = vec![T::zero(); ci * h * w];
    let mut dw = vec![T::zero(); co * ci * k * k];
    let mut db = vec![T::zero(); co];
    for oc in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let up = g[(oc * h + y as usize) * w + xx as usize];
                db[oc] = db[oc] + up;
                for icn in 0..ci {
                    let wbase = ((oc * ci) + icn) * k * k;
                    let xbase = icn * h * w;
                    for a in 0..k as isize {
                        let yy = y + d * (a - r);
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for bb in 0..k as isize {
                            let xs = xx + d * (bb - r);
                            if xs < 0 || xs >= w as isize {
                                continue;
                            }
                            let widx = wbase + (a * k as isize + bb) as usize;
                            let xidx = xbase + (yy * w as isize + xs) as usize;
                            din[xidx] = din[xidx] + wt[widx] * up;
                            dw[widx] = dw[widx] + x[xidx] * up;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), din),
        Tensor::from_vec(weight.shape(), dw),
        Tensor::from_vec(&[co], db),
    )
}

pub fn validate_lmconv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    masks: &LocalMaskSet,
) -> Result<()> {
    validate_conv(input, weight, bias, masks.dilation)?;
    let (u, n) = masks.grid();
    if input.shape()[1] != u || input.shape()[2] != n {
        return Err(Error::ShapeMismatch(format!(
            "lmconv mask grid is {}x{}, input grid is {}x{}",
            u,
            n,
            input.shape()[1],
            input.shape()[2]
        )));
    }
    if weight.shape()[2] != masks.kernel {
        return Err(Error::ShapeMismatch(format!(
            "lmconv mask kernel {} does not match weight kernel {}",
            masks.kernel,
            weight.shape()[2]
        )));
    }
    Ok(())
}

/// Locally masked convolution: at each output cell the kernel is multiplied
/// elementwise by that cell's binary mask. Checked entry point.
pub fn lmconv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    masks: &LocalMaskSet,
) -> Result<Tensor<T>> {
    validate_lmconv(input, weight, bias, masks)?;
    Ok(lmconv_forward(input, weight, bias, masks))
}

pub(crate) fn lmconv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    masks: &LocalMaskSet,
) -> Tensor<T> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let r = (k / 2) as isize;
    let d = masks.dilation as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); co * h * w];
    for y in 0..h {
        for xx in 0..w {
            let mask = masks.mask(y, xx);
            for oc in 0..co {
                let mut acc = bias.data()[oc];
                for icn in 0..ci {
                    let wbase = ((oc * ci) + icn) * k * k;
                    let xbase = icn * h * w;
                    for (mi, &mv) in mask.iter().enumerate() {
                        if mv == 0 {
                            continue;
                        }
                        let a = (mi / k) as isize;
                        let bb = (mi % k) as isize;
                        let yy = y as isize + d * (a - r);
                        let xs = xx as isize + d * (bb - r);
                        // mask construction already zeroes out-of-grid offsets
                        acc = acc + wt[wbase + mi] * x[xbase + (yy * w as isize + xs) as usize];
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(&[co, h, w], out)
}

pub(crate) fn lmconv_vjp<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    masks: &LocalMaskSet,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let r = (k / 2) as isize;
    let d = masks.dilation as isize;
    let g = upstream.data();
    let x = input.data();
    let wt = weight.data();
    let mut din = vec![T::zero(); ci * h * w];
    let mut dw = vec![T::zero(); co * ci * k * k];
    let mut db = vec![T::zero(); co];
    for y in 0..h {
        for xx in 0..w {
            let mask = masks.mask(y, xx);
            for oc in 0..co {
                let up = g[(oc * h + y) * w + xx];
                db[oc] = db[oc] + up;
                for icn in 0..ci {
                    let wbase = ((oc * ci) + icn) * k * k;
                    let xbase = icn * h * w;
                    for (mi, &mv) in mask.iter().enumerate() {
                        if mv == 0 {
                            continue;
                        }
                        let a = (mi / k) as isize;
                        let bb = (mi % k) as isize;
                        let yy = y as isize + d * (a - r);
                        let xs = xx as isize + d * (bb - r);
                        let xidx = xbase + (yy * w as isize + xs) as usize;
                        din[xidx] = din[xidx] + wt[wbase + mi] * up;
                        dw[wbase + mi] = dw[wbase + mi] + x[xidx] * up;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), din),
        Tensor::from_vec(weight.shape(), dw),
        Tensor::from_vec(&[co], db),
    )
}
