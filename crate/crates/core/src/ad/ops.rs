//! Differentiable operations recorded on a [`Tape`].
//!
//! Shape violations panic: every public operation in the crate validates its
//! domain contract before building graph nodes, so a panic here is a bug.

use super::conv;
use super::{Arr, Tape, Var};
use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix2, Ix4};

fn skew(r: [f64; 3]) -> Array2<f64> {
    ndarray::arr2(&[
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
    ])
}

/// Rodrigues rotation matrix from an axis-angle vector, stable near zero.
pub fn rotation_matrix(r: &[f64]) -> Array2<f64> {
    let theta2 = r.iter().map(|x| x * x).sum::<f64>();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-6 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew([r[0], r[1], r[2]]);
    let k2 = k.dot(&k);
    Array2::eye(3) + &(a * &k) + &(b * &k2)
}

impl Tape {
    fn unary(&self, x: Var, value: Arr, back: impl Fn(&Arr) -> Arr + 'static) -> Var {
        self.push(
            value,
            Some(Box::new(move |g, sink| sink(x.0, back(g)))),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let value = &*va + &*vb;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let value = &*va - &*vb;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g);
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let value = &*va * &*vb;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &*vb);
                sink(b.0, g * &*va);
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let value = &*va / &*vb;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g / &*vb);
                sink(b.0, -(g * &*va) / &(&*vb * &*vb));
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        self.unary(a, &*va * c, move |g| g * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        self.unary(a, &*va + c, |g| g.clone())
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = &*va * &*va;
        self.unary(a, value, move |g| g * &(&*va * 2.0))
    }

    /// `a [m,k] · b [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dim mismatch");
        let value = a2.dot(&b2).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, g2.dot(&b2.t()).into_dyn());
                sink(b.0, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// `a [m,k] · b [n,k]ᵀ -> [m,n]` (linear layers store weights as `[out, in]`).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a2.shape()[1], b2.shape()[1], "matmul_nt: inner dim mismatch");
        let value = a2.dot(&b2.t()).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                sink(a.0, g2.dot(&b2).into_dyn());
                sink(b.0, g2.t().dot(&a2).into_dyn());
            })),
        )
    }

    /// Fully connected layer: `x [b,i]`, `w [o,i]`, `bias [o]`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_bias_row(y, bias)
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
        let in_hw = (x4.shape()[2], x4.shape()[3]);
        let k_hw = (w4.shape()[2], w4.shape()[3]);
        let value = conv::conv2d_fwd(x4, w4, stride, pad).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                sink(x.0, conv::conv2d_bwd_input(g4, w4, stride, pad, in_hw).into_dyn());
                sink(w.0, conv::conv2d_bwd_weight(x4, g4, stride, pad, k_hw).into_dyn());
            })),
        )
    }

    /// Transposed convolution: adjoint of `conv2d(·, w, stride, pad)` with
    /// output spatial size `out_hw`. `x` has the conv's *output* channel
    /// count; the result has its *input* channel count.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
        let k_hw = (w4.shape()[2], w4.shape()[3]);
        let value = conv::conv2d_bwd_input(x4, w4, stride, pad, out_hw).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                sink(x.0, conv::conv2d_fwd(g4, w4, stride, pad).into_dyn());
                // Same kernel as the conv weight grad with the roles of
                // activation and gradient swapped.
                sink(w.0, conv::conv2d_bwd_weight(g4, x4, stride, pad, k_hw).into_dyn());
            })),
        )
    }

    /// `x [b,c,h,w] + bias [c]`
    pub fn add_bias_ch(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vx.shape()[1], vb.shape()[0], "add_bias_ch: channel mismatch");
        let b = vb.view().into_dimensionality::<Ix1>().unwrap();
        let mut value = vx.as_ref().clone();
        for (c, mut lane) in value
            .view_mut()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .axis_iter_mut(Axis(1))
            .enumerate()
        {
            lane += b[c];
        }
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gb = g4.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
                sink(bias.0, gb.into_dyn());
            })),
        )
    }

    /// `x [r,c] + bias [c]`
    pub fn add_bias_row(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vx.shape()[1], vb.shape()[0], "add_bias_row: dim mismatch");
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let value = (&x2 + &b1).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(bias.0, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// `x [b,c,h,w] * s [b,c]`, broadcasting the scale over space. This is
    /// the workhorse of style modulation and demodulation.
    pub fn scale_channels(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(
            &vx.shape()[..2],
            vs.shape(),
            "scale_channels: [b,c] mismatch"
        );
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
        let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let sb = s2.insert_axis(Axis(2)).insert_axis(Axis(3));
        let value = (&x4 * &sb.broadcast((b, c, h, w)).unwrap()).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
                let sb = s2.insert_axis(Axis(2)).insert_axis(Axis(3));
                let gx = (&g4 * &sb.broadcast(g4.raw_dim()).unwrap()).into_dyn();
                sink(x.0, gx);
                let gs = (&g4 * &x4).sum_axis(Axis(3)).sum_axis(Axis(2));
                sink(s.0, gs.into_dyn());
            })),
        )
    }

    /// `x [r,c] * s [r]`, broadcasting over columns.
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vx.shape()[0], vs.shape()[0], "scale_rows: row mismatch");
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let s1 = vs.view().into_dimensionality::<Ix1>().unwrap();
        let value = (&x2 * &s1.insert_axis(Axis(1))).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
                let s1 = vs.view().into_dimensionality::<Ix1>().unwrap();
                sink(x.0, (&g2 * &s1.insert_axis(Axis(1))).into_dyn());
                sink(s.0, (&g2 * &x2).sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let vx = self.value(x);
        let value = vx.mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.unary(x, value, move |g| {
            let mask = vx.mapv(|v| if v >= 0.0 { 1.0 } else { slope });
            g * &mask
        })
    }

    /// Elementwise product with a constant mask (same shape). Used to splice
    /// piecewise-constant derivative factors into hand-built gradient graphs.
    pub fn mul_mask(&self, x: Var, mask: Arr) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), mask.shape(), "mul_mask: shape mismatch");
        let value = &*vx * &mask;
        self.unary(x, value, move |g| g * &mask)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let vx = self.value(x);
        let y = vx.mapv(f64::tanh);
        let y_back = y.clone();
        self.unary(x, y, move |g| g * &y_back.mapv(|t| 1.0 - t * t))
    }

    pub fn softplus(&self, x: Var) -> Var {
        let vx = self.value(x);
        let value = vx.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.unary(x, value, move |g| {
            g * &vx.mapv(|v| 1.0 / (1.0 + (-v).exp()))
        })
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self, x: Var) -> Var {
        let vx = self.value(x);
        let value = vx.mapv(f64::abs);
        self.unary(x, value, move |g| g * &vx.mapv(f64::signum))
    }

    /// sqrt(max(x, 0)) with gradient 0 wherever x == 0, so exact zeros stay
    /// exact and do not produce infinities.
    pub fn sqrt_guard(&self, x: Var) -> Var {
        let vx = self.value(x);
        let y = vx.mapv(|v| v.max(0.0).sqrt());
        let y_back = y.clone();
        self.unary(x, y, move |g| {
            let d = y_back.mapv(|s| if s > 0.0 { 0.5 / s } else { 0.0 });
            g * &d
        })
    }

    /// (x + eps)^(-1/2)
    pub fn rsqrt_eps(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let y = vx.mapv(|v| 1.0 / (v + eps).sqrt());
        let y_back = y.clone();
        self.unary(x, y, move |g| {
            g * &y_back.mapv(|s| -0.5 * s * s * s)
        })
    }

    /// Nearest-neighbour 2x upsampling of `[b,c,h,w]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x4[(bi, ci, i, j)];
                        out[(bi, ci, 2 * i, 2 * j)] = v;
                        out[(bi, ci, 2 * i, 2 * j + 1)] = v;
                        out[(bi, ci, 2 * i + 1, 2 * j)] = v;
                        out[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, h2, w2) = (g4.shape()[0], g4.shape()[1], g4.shape()[2], g4.shape()[3]);
            let mut gx = Array4::<f64>::zeros((b, c, h2 / 2, w2 / 2));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            gx[(bi, ci, i / 2, j / 2)] += g4[(bi, ci, i, j)];
                        }
                    }
                }
            }
            gx.into_dyn()
        })
    }

    /// Non-overlapping box average over `factor x factor` blocks.
    pub fn avg_downsample(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert!(
            h % factor == 0 && w % factor == 0,
            "avg_downsample: size not divisible by factor"
        );
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(bi, ci, i / factor, j / factor)] += x4[(bi, ci, i, j)] * norm;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, oh, ow) = (g4.shape()[0], g4.shape()[1], g4.shape()[2], g4.shape()[3]);
            let mut gx = Array4::<f64>::zeros((b, c, oh * factor, ow * factor));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..oh * factor {
                        for j in 0..ow * factor {
                            gx[(bi, ci, i, j)] = g4[(bi, ci, i / factor, j / factor)] * norm;
                        }
                    }
                }
            }
            gx.into_dyn()
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old_shape: Vec<usize> = vx.shape().to_vec();
        assert_eq!(
            vx.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = vx
            .as_ref()
            .clone()
            .into_shape_with_order(shape)
            .unwrap();
        self.unary(x, value, move |g| {
            g.clone().into_shape_with_order(old_shape.as_slice()).unwrap()
        })
    }

    /// Sum over all elements, yielding a 0-d array.
    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape: Vec<usize> = vx.shape().to_vec();
        let value = ndarray::arr0(vx.sum()).into_dyn();
        self.unary(x, value, move |g| {
            let s = g.iter().next().copied().unwrap();
            Arr::from_elem(shape.as_slice(), s)
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of `[r,c] -> [r]`.
    pub fn sum_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let cols = x2.shape()[1];
        let value = x2.sum_axis(Axis(1)).into_dyn();
        self.unary(x, value, move |g| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let rows = g1.len();
            let mut gx = Array2::<f64>::zeros((rows, cols));
            for i in 0..rows {
                gx.row_mut(i).fill(g1[i]);
            }
            gx.into_dyn()
        })
    }

    /// Column slice of `[r,c]`: columns `start .. start+len`.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let (rows, cols) = (x2.shape()[0], x2.shape()[1]);
        assert!(start + len <= cols, "slice_cols: out of range");
        let value = x2
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.unary(x, value, move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((rows, cols));
            gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
            gx.into_dyn()
        })
    }

    /// Gather rows of a `[V,c]` matrix by index; backward scatter-adds.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let (rows, cols) = (x2.shape()[0], x2.shape()[1]);
        assert!(idx.iter().all(|&i| i < rows), "gather_rows: index out of range");
        let idx: Vec<usize> = idx.to_vec();
        let mut value = Array2::<f64>::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&x2.row(i));
        }
        self.unary(x, value.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((rows, cols));
            for (k, &i) in idx.iter().enumerate() {
                let mut row = gx.row_mut(i);
                row += &g2.row(k);
            }
            gx.into_dyn()
        })
    }

    /// `x [b,c,h,w] + strength * noise [h,w]`, noise broadcast over batch and
    /// channels. `strength` is a scalar variable (a learned per-site gain).
    pub fn add_noise(&self, x: Var, noise: Arr, strength: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        assert_eq!(
            &vx.shape()[2..],
            noise.shape(),
            "add_noise: spatial shape mismatch"
        );
        let s = self.scalar_value(strength);
        let n2 = noise.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = x4.to_owned();
        for bi in 0..value.shape()[0] {
            for ci in 0..value.shape()[1] {
                let mut plane = value.slice_mut(ndarray::s![bi, ci, .., ..]);
                plane.scaled_add(s, &n2);
            }
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone());
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let n2 = noise.view().into_dimensionality::<Ix2>().unwrap();
                let mut gs = 0.0;
                for bi in 0..g4.shape()[0] {
                    for ci in 0..g4.shape()[1] {
                        gs += (&g4.slice(ndarray::s![bi, ci, .., ..]) * &n2).sum();
                    }
                }
                sink(strength.0, ndarray::arr0(gs).into_dyn());
            })),
        )
    }

    /// Rigid transform of a vertex set: `rot` is an axis-angle vector `[3]`,
    /// `t` a translation `[3]`, `v` the vertices `[V,3]`. Differentiable in
    /// all three inputs (rotation Jacobian per Gallego & Yezzi).
    pub fn rigid_transform(&self, v: Var, rot: Var, t: Var) -> Var {
        let (vv, vr, vt) = (self.value(v), self.value(rot), self.value(t));
        assert_eq!(vv.shape()[1], 3, "rigid_transform: vertices must be [V,3]");
        assert_eq!(vr.len(), 3, "rigid_transform: rot must be [3]");
        assert_eq!(vt.len(), 3, "rigid_transform: t must be [3]");
        let r: Vec<f64> = vr.iter().copied().collect();
        let rm = rotation_matrix(&r);
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = v2.dot(&rm.t()); // row-vectors: (R v)ᵀ = vᵀ Rᵀ
        let t1 = vt.view().into_dimensionality::<Ix1>().unwrap();
        value += &t1;
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
                // d/dv: Rᵀ g per row == G · R
                sink(v.0, g2.dot(&rm).into_dyn());
                // d/dt: column sums of G
                sink(t.0, g2.sum_axis(Axis(0)).into_dyn());
                // d/drot via A = Gᵀ V and per-component Jacobian of R
                let a = g2.t().dot(&v2); // [3,3], a[p,q] = Σ_i g_i[p] v_i[q]
                let theta2 = r.iter().map(|x| x * x).sum::<f64>();
                let mut gr = Array1::<f64>::zeros(3);
                if theta2 < 1e-16 {
                    // limit: dR/dr_k = [e_k]×
                    for k in 0..3 {
                        let mut e = [0.0; 3];
                        e[k] = 1.0;
                        let m = skew(e);
                        gr[k] = (&m * &a).sum();
                    }
                } else {
                    let eye = Array2::<f64>::eye(3);
                    let i_minus_r = &eye - &rm;
                    for k in 0..3 {
                        let mut e = Array1::<f64>::zeros(3);
                        e[k] = 1.0;
                        let w = i_minus_r.dot(&e);
                        let cross = [
                            r[1] * w[2] - r[2] * w[1],
                            r[2] * w[0] - r[0] * w[2],
                            r[0] * w[1] - r[1] * w[0],
                        ];
                        let m = (r[k] * &skew([r[0], r[1], r[2]]) + &skew(cross))
                            .dot(&rm)
                            / theta2;
                        gr[k] = (&m * &a).sum();
                    }
                }
                sink(rot.0, gr.into_dyn());
            })),
        )
    }
}
