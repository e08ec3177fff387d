//! 3x3 convolution kernels (cross-correlation, NCHW). Parallelised with
//! rayon over disjoint output regions only, so results are independent of
//! the thread count.

use rayon::prelude::*;

use crate::error::{CvdError, Result};

const KS: usize = 3;

pub fn out_dim(input: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < KS {
        return None;
    }
    Some((padded - KS) / stride + 1)
}

/// Output-column range [lo, hi) for which ix = ox*stride + kx - pad lands
/// inside [0, w). Hoisting this bound out of the inner loops leaves them
/// branch-free.
#[inline]
fn ox_range(w: usize, ow: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = (w + pad).saturating_sub(kx).div_ceil(stride).min(ow);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(
    x: &[f64],
    xshape: &[usize],
    k: &[f64],
    kshape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if xshape.len() != 4 || kshape.len() != 4 {
        return Err(CvdError::Shape("conv2d expects [B,C,H,W] and [O,C,3,3]".into()));
    }
    if kshape[2] != KS || kshape[3] != KS {
        return Err(CvdError::Shape("conv2d kernel must be 3x3".into()));
    }
    if kshape[1] != xshape[1] {
        return Err(CvdError::Shape(format!(
            "conv2d channel mismatch: input {} vs kernel {}",
            xshape[1], kshape[1]
        )));
    }
    if stride < 1 {
        return Err(CvdError::Shape("conv2d stride must be >= 1".into()));
    }
    let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let o = kshape[0];
    let (oh, ow) = match (out_dim(h, pad, stride), out_dim(w, pad, stride)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(CvdError::Shape(format!(
                "conv2d produces non-positive output dims for input {h}x{w}, pad {pad}, stride {stride}"
            )))
        }
    };
    let mut out = vec![0.0; b * o * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(bo, dst)| {
        let (bi, oi) = (bo / o, bo % o);
        for ci in 0..c {
            let xs = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let ks = &k[(oi * c + ci) * KS * KS..(oi * c + ci + 1) * KS * KS];
            for ky in 0..KS {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xs[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for kx in 0..KS {
                        let kv = ks[ky * KS + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ox_range(w, ow, stride, pad, kx);
                        let base = lo * stride + kx - pad;
                        if stride == 1 {
                            let xs = &xrow[base..base + (hi - lo)];
                            for (d, &xv) in drow[lo..hi].iter_mut().zip(xs) {
                                *d += kv * xv;
                            }
                        } else {
                            for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d += kv * xrow[base + i * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok((out, vec![b, o, oh, ow]))
}

pub fn conv2d_backward_input(
    g: &[f64],
    oshape: &[usize],
    k: &[f64],
    kshape: &[usize],
    xshape: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let o = kshape[0];
    let (oh, ow) = (oshape[2], oshape[3]);
    let mut dx = vec![0.0; b * c * h * w];
    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(bi, dxb)| {
        for oi in 0..o {
            let gs = &g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let ks = &k[(oi * c + ci) * KS * KS..(oi * c + ci + 1) * KS * KS];
                let dxc = &mut dxb[ci * h * w..(ci + 1) * h * w];
                for ky in 0..KS {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gs[oy * ow..(oy + 1) * ow];
                        let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..KS {
                            let kv = ks[ky * KS + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = ox_range(w, ow, stride, pad, kx);
                            let base = lo * stride + kx - pad;
                            if stride == 1 {
                                let ds = &mut drow[base..base + (hi - lo)];
                                for (d, &gv) in ds.iter_mut().zip(&grow[lo..hi]) {
                                    *d += kv * gv;
                                }
                            } else {
                                for (i, &gv) in grow[lo..hi].iter().enumerate() {
                                    drow[base + i * stride] += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_kernel(
    g: &[f64],
    oshape: &[usize],
    x: &[f64],
    xshape: &[usize],
    kshape: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let o = kshape[0];
    let (oh, ow) = (oshape[2], oshape[3]);
    let mut dk = vec![0.0; o * c * KS * KS];
    dk.par_chunks_mut(c * KS * KS).enumerate().for_each(|(oi, dko)| {
        for bi in 0..b {
            let gs = &g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let xs = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let dkc = &mut dko[ci * KS * KS..(ci + 1) * KS * KS];
                for ky in 0..KS {
                    for kx in 0..KS {
                        let (lo, hi) = ox_range(w, ow, stride, pad, kx);
                        let base = lo * stride + kx - pad;
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xs[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &gs[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let xv = &xrow[base..base + (hi - lo)];
                                for (&gv, &x) in grow[lo..hi].iter().zip(xv) {
                                    acc += gv * x;
                                }
                            } else {
                                for (i, &gv) in grow[lo..hi].iter().enumerate() {
                                    acc += gv * xrow[base + i * stride];
                                }
                            }
                        }
                        dkc[ky * KS + kx] += acc;
                    }
                }
            }
        }
    });
    dk
}
