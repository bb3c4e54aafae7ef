//! Raw convolution kernels: im2col + GEMM, shared by the forward op, both
//! backward passes and the transposed convolution.
//!
//! Layouts: activations `[batch, channels, height, width]`, weights
//! `[out_ch, in_ch, kh, kw]`. All loops over the batch axis run in parallel;
//! each sample writes disjoint output, so results are deterministic.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, ArrayView3, ArrayView4, Axis};

pub fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample into a `[ci*kh*kw, oh*ow]` patch matrix.
fn im2col(
    x: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        let plane = x.index_axis(Axis(0), c);
        for u in 0..kh {
            for v in 0..kw {
                let row = (c * kh + u) * kw + v;
                let mut out_row = cols.row_mut(row);
                for p in 0..oh {
                    let i = (p * stride + u) as isize - pad as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    for q in 0..ow {
                        let j = (q * stride + v) as isize - pad as isize;
                        if j < 0 || j as usize >= w {
                            continue;
                        }
                        out_row[p * ow + q] = plane[(i as usize, j as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch matrix back onto a `[ci, h, w]` sample, accumulating
/// overlapping contributions.
fn col2im(
    cols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        let mut plane = x.index_axis_mut(Axis(0), c);
        for u in 0..kh {
            for v in 0..kw {
                let row = cols.row((c * kh + u) * kw + v);
                for p in 0..oh {
                    let i = (p * stride + u) as isize - pad as isize;
                    if i < 0 || i as usize >= h {
                        continue;
                    }
                    for q in 0..ow {
                        let j = (q * stride + v) as isize - pad as isize;
                        if j < 0 || j as usize >= w {
                            continue;
                        }
                        plane[(i as usize, j as usize)] += row[p * ow + q];
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(w: ArrayView4<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    w.to_shape((co, ci * kh * kw)).unwrap().to_owned()
}

pub fn conv2d_fwd(x: ArrayView4<f64>, w: ArrayView4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ciw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ciw, "conv2d: channel mismatch");
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(wd, kw, stride, pad);
    let wmat = weight_matrix(w);
    let mut out = Array4::<f64>::zeros((b, co, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut ob)| {
            let cols = im2col(x.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
            let y = wmat.dot(&cols); // [co, oh*ow]
            ob.assign(&y.into_shape_with_order((co, oh, ow)).unwrap());
        });
    out
}

/// Gradient w.r.t. the convolution input; also the forward pass of the
/// transposed convolution.
pub fn conv2d_bwd_input(
    g: ArrayView4<f64>,
    w: ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (b, co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (cow, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(co, cow, "conv2d backward: channel mismatch");
    let (h, wd) = in_hw;
    debug_assert_eq!(oh, out_size(h, kh, stride, pad));
    debug_assert_eq!(ow, out_size(wd, kw, stride, pad));
    let wmat = weight_matrix(w); // [co, ci*kh*kw]
    let mut gx = Array4::<f64>::zeros((b, ci, h, wd));
    gx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut xb)| {
            let gb = g.index_axis(Axis(0), bi);
            let gmat = gb.to_shape((co, oh * ow)).unwrap().to_owned();
            let gcols = wmat.t().dot(&gmat); // [ci*kh*kw, oh*ow]
            let sample = col2im(&gcols, ci, h, wd, kh, kw, stride, pad, oh, ow);
            xb.assign(&sample);
        });
    gx
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_bwd_weight(
    x: ArrayView4<f64>,
    g: ArrayView4<f64>,
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Array4<f64> {
    let (b, ci) = (x.shape()[0], x.shape()[1]);
    let (bg, co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    assert_eq!(b, bg, "conv2d weight grad: batch mismatch");
    let (kh, kw) = k_hw;
    let per_sample: Vec<Array2<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(x.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
            let gb = g.index_axis(Axis(0), bi);
            let gmat = gb.to_shape((co, oh * ow)).unwrap().to_owned();
            gmat.dot(&cols.t()) // [co, ci*kh*kw]
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((co, ci * kh * kw));
    for s in &per_sample {
        acc += s; // sequential sum keeps the reduction order fixed
    }
    acc.into_shape_with_order((co, ci, kh, kw)).unwrap()
}

