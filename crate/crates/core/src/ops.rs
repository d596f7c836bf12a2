//! Differentiable operations recorded on a [`Graph`].
//!
//! Image-shaped tensors are `[C, H, W]`; token-shaped tensors are `[N, D]`.
//! Shape violations are programming errors and panic; public entry points of
//! the model modules validate user input before reaching these kernels.

use std::ops::Range;

use crate::graph::{Graph, Var};
use crate::tensor::{gemm, MatRef, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("rank-0 tensor has no last axis")
}

/// Bilinear corner indices and weights for a point inside an `h × w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearCell {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearCell {
    /// `u` along width, `v` along height; both must be inside the grid.
    pub fn new(u: f64, v: f64, w: usize, h: usize) -> Self {
        let (x0, x1, fx) = axis_cell(u, w);
        let (y0, y1, fy) = axis_cell(v, h);
        Self { x0, x1, y0, y1, fx, fy }
    }

    /// `(flat index, weight)` for the four corners on a row-major `h × w` grid.
    pub fn taps(&self, w: usize) -> [(usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0 * w + self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0 * w + self.x1, fx * (1.0 - fy)),
            (self.y1 * w + self.x0, (1.0 - fx) * fy),
            (self.y1 * w + self.x1, fx * fy),
        ]
    }
}

fn axis_cell(c: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

/// Source taps for resizing one axis from `n_in` to `n_out` samples with
/// half-pixel alignment.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let ys = y as isize + ky as isize - pad;
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ys as usize * w..(ys as usize + 1) * w];
                    let src_lo = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src_row[src_lo..src_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let ys = y as isize + ky as isize - pad;
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    let dst_lo = ys as usize * w + (x_lo as isize + dx) as usize;
                    let dst = &mut plane[dst_lo..dst_lo + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "add");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "sub");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.scale(-1.0))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "mul");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, &[a, b], move |g| {
            vec![(a, g.zip_map(&vb, |g, y| g * y)), (b, g.zip_map(&va, |g, x| g * x))]
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "div");
        let out = va.zip_map(&vb, |x, y| x / y);
        self.push(out, &[a, b], move |g| {
            let ga = g.zip_map(&vb, |g, y| g / y);
            let gb = Tensor::from_fn(g.shape().to_vec(), |i| {
                // Split so tiny denominators do not underflow when squared.
                -(g.data()[i] / vb.data()[i]) * (va.data()[i] / vb.data()[i])
            });
            vec![(a, ga), (b, gb)]
        })
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], move |g| vec![(x, g.scale(scale))])
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.max(0.0));
        self.push(out, &[x], move |g| vec![(x, g.zip_map(&vx, |g, v| if v > 0.0 { g } else { 0.0 }))])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = std::rc::Rc::new(self.value(x).map(sigmoid));
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| vec![(x, g.zip_map(&y, |g, s| g * s * (1.0 - s)))])
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = std::rc::Rc::new(self.value(x).map(f64::exp));
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| vec![(x, g.zip_map(&y, |g, e| g * e))])
    }

    pub fn ln(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(f64::ln);
        self.push(out, &[x], move |g| vec![(x, g.zip_map(&vx, |g, v| g / v))])
    }

    pub fn cos(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(f64::cos);
        self.push(out, &[x], move |g| vec![(x, g.zip_map(&vx, |g, v| -g * v.sin()))])
    }

    pub fn sin(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(f64::sin);
        self.push(out, &[x], move |g| vec![(x, g.zip_map(&vx, |g, v| g * v.cos()))])
    }

    /// Values clamped to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.clamp(lo, hi));
        self.push(out, &[x], move |g| {
            vec![(x, g.zip_map(&vx, |g, v| if v >= lo && v <= hi { g } else { 0.0 }))]
        })
    }

    /// Identity forward; multiplies the incoming gradient by `-scale` backward.
    pub fn gradient_reversal(&self, x: Var, scale: f64) -> Var {
        let value = self.value(x);
        self.push_rc(value, &[x], move |g| vec![(x, g.scale(-scale))])
    }

    // ---- broadcasting ------------------------------------------------------

    /// Adds `r` (`[D]`) to every row of `x` (`[.., D]`).
    pub fn add_row(&self, x: Var, r: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(r));
        let d = vr.numel();
        assert_eq!(last_dim(&vx), d, "add_row: width mismatch");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rshape = vr.shape().to_vec();
        self.push(out, &[x, r], move |g| {
            let mut gr = vec![0.0; d];
            for row in g.data().chunks(d) {
                for (a, b) in gr.iter_mut().zip(row) {
                    *a += b;
                }
            }
            vec![(x, g.clone()), (r, Tensor::new(rshape, gr))]
        })
    }

    /// Multiplies every row of `x` (`[.., D]`) by `r` (`[D]`) elementwise.
    pub fn mul_row(&self, x: Var, r: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(r));
        let d = vr.numel();
        assert_eq!(last_dim(&vx), d, "mul_row: width mismatch");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let rshape = vr.shape().to_vec();
        self.push(out, &[x, r], move |g| {
            let mut gx = g.clone();
            let mut gr = vec![0.0; d];
            for (grow, xrow) in gx.data_mut().chunks_mut(d).zip(vx.data().chunks(d)) {
                for j in 0..d {
                    gr[j] += grow[j] * xrow[j];
                    grow[j] *= vr.data()[j];
                }
            }
            vec![(x, gx), (r, Tensor::new(rshape, gr))]
        })
    }

    /// Scales row `i` of `x` (`[N, D]`) by `s[i]` (`s: [N]`).
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vs.numel();
        assert_eq!(vx.dim(0), n, "scale_rows: row count mismatch");
        let d = vx.numel() / n.max(1);
        let mut out = (*vx).clone();
        for (row, &k) in out.data_mut().chunks_mut(d.max(1)).zip(vs.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let sshape = vs.shape().to_vec();
        self.push(out, &[x, s], move |g| {
            let mut gx = g.clone();
            let mut gs = vec![0.0; n];
            for i in 0..n {
                let grow = &mut gx.data_mut()[i * d..(i + 1) * d];
                let xrow = &vx.data()[i * d..(i + 1) * d];
                gs[i] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                grow.iter_mut().for_each(|v| *v *= vs.data()[i]);
            }
            vec![(x, gx), (s, Tensor::new(sshape, gs))]
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        self.push(Tensor::scalar(vx.sum()), &[x], move |g| vec![(x, Tensor::full(shape, g.item()))])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[N, D] -> [N]`, summing each row.
    pub fn sum_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let n = vx.numel() / d.max(1);
        let out: Vec<f64> = vx.data().chunks(d.max(1)).map(|r| r.iter().sum()).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new([n], out), &[x], move |g| {
            let gd = Tensor::from_fn(shape, |i| g.data()[i / d]);
            vec![(x, gd)]
        })
    }

    /// `[N, D] -> [D]`, summing over rows.
    pub fn sum_cols(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let mut out = vec![0.0; d];
        for row in vx.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new([d], out), &[x], move |g| {
            vec![(x, Tensor::from_fn(shape, |i| g.data()[i % d]))]
        })
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 3, "global_avg_pool expects [C, H, W]");
        let c = vx.dim(0);
        let hw = vx.dim(1) * vx.dim(2);
        let out: Vec<f64> = vx.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new([c], out), &[x], move |g| {
            vec![(x, Tensor::from_fn(shape, |i| g.data()[i / hw] / hw as f64))]
        })
    }

    // ---- normalization and softmax ----------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = std::rc::Rc::new(out);
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![(x, gx)]
        })
    }

    /// Log-softmax along the last axis, computed with the log-sum-exp shift.
    pub fn log_softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = std::rc::Rc::new(out);
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let total: f64 = grow.iter().sum();
                for (gv, lv) in grow.iter_mut().zip(yrow) {
                    *gv -= lv.exp() * total;
                }
            }
            vec![(x, gx)]
        })
    }

    /// Softmax of `[N, D]` over the token axis, independently per column.
    pub fn softmax_cols(&self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "softmax_cols expects [N, D]");
        let (n, d) = (vx.dim(0), vx.dim(1));
        let mut out = (*vx).clone();
        let data = out.data_mut();
        for j in 0..d {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(data[i * d + j]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = (data[i * d + j] - m).exp();
                data[i * d + j] = e;
                z += e;
            }
            for i in 0..n {
                data[i * d + j] /= z;
            }
        }
        let out = std::rc::Rc::new(out);
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| {
            let mut dot = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    dot[j] += g.data()[i * d + j] * y.data()[i * d + j];
                }
            }
            let gx = Tensor::from_fn([n, d], |k| y.data()[k] * (g.data()[k] - dot[k % d]));
            vec![(x, gx)]
        })
    }

    /// Each row of `[.., D]` scaled to unit L2 norm.
    pub fn l2_normalize(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let rows = vx.numel() / d;
        self.normalize_strided(x, rows, d, 1, d)
    }

    /// Each pixel of `[C, H, W]` scaled to unit L2 norm across channels.
    pub fn l2_normalize_channels(&self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 3, "l2_normalize_channels expects [C, H, W]");
        let hw = vx.dim(1) * vx.dim(2);
        self.normalize_strided(x, hw, vx.dim(0), hw, 1)
    }

    /// Normalizes `groups` vectors of `len` elements; element `k` of group `i`
    /// lives at `i * group_stride + k * elem_stride`.
    fn normalize_strided(&self, x: Var, groups: usize, len: usize, elem_stride: usize, group_stride: usize) -> Var {
        const EPS: f64 = 1e-12;
        let vx = self.value(x);
        let mut norms = vec![0.0; groups];
        for (i, n) in norms.iter_mut().enumerate() {
            let base = i * group_stride;
            *n = (0..len).map(|k| vx.data()[base + k * elem_stride].powi(2)).sum::<f64>().sqrt().max(EPS);
        }
        let mut out = (*vx).clone();
        for (i, &n) in norms.iter().enumerate() {
            let base = i * group_stride;
            for k in 0..len {
                out.data_mut()[base + k * elem_stride] /= n;
            }
        }
        let out = std::rc::Rc::new(out);
        let y = std::rc::Rc::clone(&out);
        self.push_rc(out, &[x], move |g| {
            let mut gx = Tensor::zeros(g.shape().to_vec());
            for (i, &n) in norms.iter().enumerate() {
                let base = i * group_stride;
                let dot: f64 = (0..len).map(|k| g.data()[base + k * elem_stride] * y.data()[base + k * elem_stride]).sum();
                for k in 0..len {
                    let idx = base + k * elem_stride;
                    gx.data_mut()[idx] = if n > EPS { (g.data()[idx] - y.data()[idx] * dot) / n } else { g.data()[idx] / n };
                }
            }
            vec![(x, gx)]
        })
    }

    /// Euclidean norm of each row of `[N, D]`, giving `[N]`. The gradient of a
    /// zero row is zero.
    pub fn norm_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = last_dim(&vx);
        let n = vx.numel() / d;
        let norms: Vec<f64> = vx.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::new([n], norms.clone());
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_fn(vx.shape().to_vec(), |k| {
                let nr = norms[k / d];
                if nr > 0.0 {
                    g.data()[k / d] * vx.data()[k] / nr
                } else {
                    0.0
                }
            });
            vec![(x, gx)]
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a) @ op(b)` for rank-2 inputs, where `op` optionally transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.rank() == 2 && vb.rank() == 2, "matmul expects rank-2 inputs");
        let ma = MatRef::new(va.data(), va.dim(0), va.dim(1));
        let mb = MatRef::new(vb.data(), vb.dim(0), vb.dim(1));
        let ma = if ta { ma.t() } else { ma };
        let mb = if tb { mb.t() } else { mb };
        let m = if ta { va.dim(1) } else { va.dim(0) };
        let k = if ta { va.dim(0) } else { va.dim(1) };
        let k2 = if tb { vb.dim(1) } else { vb.dim(0) };
        let n = if tb { vb.dim(0) } else { vb.dim(1) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm(1.0, ma, mb, 0.0, &mut out);
        self.push(Tensor::new([m, n], out), &[a, b], move |g| {
            let gm = MatRef::new(g.data(), m, n);
            let ma = MatRef::new(va.data(), va.dim(0), va.dim(1));
            let mb = MatRef::new(vb.data(), vb.dim(0), vb.dim(1));
            // d op(a) = g op(b)^T ; d op(b) = op(a)^T g
            let mut ga = vec![0.0; va.numel()];
            if ta {
                // a^T = op(a): d a = (g op(b)^T)^T = op(b) g^T
                gemm(1.0, if tb { mb.t() } else { mb }, gm.t(), 0.0, &mut ga);
            } else {
                gemm(1.0, gm, if tb { mb } else { mb.t() }, 0.0, &mut ga);
            }
            let mut gb = vec![0.0; vb.numel()];
            if tb {
                // d b = (op(a)^T g)^T = g^T op(a)
                gemm(1.0, gm.t(), if ta { ma.t() } else { ma }, 0.0, &mut gb);
            } else {
                gemm(1.0, if ta { ma } else { ma.t() }, gm, 0.0, &mut gb);
            }
            vec![(a, Tensor::new(va.shape().to_vec(), ga)), (b, Tensor::new(vb.shape().to_vec(), gb))]
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Fully connected layer: `x [N, in] @ w^T [in, out] + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, w, false, true);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn transpose(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.transpose();
        self.push(out, &[x], move |g| vec![(x, g.transpose())])
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape.to_vec());
        self.push(out, &[x], move |g| vec![(x, g.clone().reshape(old))])
    }

    /// Concatenation along `axis`.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let base = vals[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            assert_eq!(v.rank(), base.len(), "concat rank mismatch");
            for (i, (&a, &b)) in v.shape().iter().zip(&base).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch off-axis");
            }
            widths.push(v.dim(axis) * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total / inner.max(1);
        let parents = xs.to_vec();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.push(Tensor::new(shape, out), xs, move |g| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(w * outer)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&g.data()[off..off + w]);
                    off += w;
                }
            }
            parents.into_iter().zip(grads).zip(shapes).map(|((p, gv), s)| (p, Tensor::new(s, gv))).collect()
        })
    }

    /// Sub-range of `axis`.
    pub fn slice(&self, x: Var, axis: usize, range: Range<usize>) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        assert!(range.end <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (lo, hi) = (range.start * inner, range.end * inner);
        let mut out = Vec::with_capacity(outer * (hi - lo));
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[o * full + lo..o * full + hi]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = range.end - range.start;
        self.push(Tensor::new(oshape, out), &[x], move |g| {
            let mut gx = Tensor::zeros(shape);
            let w = hi - lo;
            for o in 0..outer {
                gx.data_mut()[o * full + lo..o * full + hi].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![(x, gx)]
        })
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&self, xs: &[Var]) -> Var {
        let shape = self.shape(xs[0]);
        let reshaped: Vec<Var> = xs
            .iter()
            .map(|&v| {
                let mut s = vec![1];
                s.extend_from_slice(&shape);
                self.reshape(v, &s)
            })
            .collect();
        self.concat(&reshaped, 0)
    }

    /// Rows of `x` (`[N, ..]`) picked by `idx`.
    pub fn index_rows(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let row = vx.numel() / shape[0].max(1);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&vx.data()[i * row..(i + 1) * row]);
        }
        let mut oshape = shape.clone();
        oshape[0] = idx.len();
        let idx = idx.to_vec();
        self.push(Tensor::new(oshape, out), &[x], move |g| {
            let mut gx = Tensor::zeros(shape);
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in gx.data_mut()[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                    *d += s;
                }
            }
            vec![(x, gx)]
        })
    }

    /// `out[i] = Σ w · x_flat[j]` over the `(j, w)` taps of entry `i`.
    pub fn gather_weighted(&self, x: Var, taps: Vec<Vec<(usize, f64)>>) -> Var {
        let vx = self.value(x);
        let out: Vec<f64> = taps.iter().map(|t| t.iter().map(|&(j, w)| w * vx.data()[j]).sum()).collect();
        let shape = vx.shape().to_vec();
        self.push(Tensor::new([taps.len()], out), &[x], move |g| {
            let mut gx = Tensor::zeros(shape);
            for (t, &gv) in taps.iter().zip(g.data()) {
                for &(j, w) in t {
                    gx.data_mut()[j] += w * gv;
                }
            }
            vec![(x, gx)]
        })
    }

    // ---- image operations --------------------------------------------------

    /// Same-size 2-D convolution of `x [Cin, H, W]` with `w [Cout, Cin, k, k]`
    /// (odd `k`, zero padding `k / 2`) plus optional bias `[Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.rank(), 3, "conv2d expects input [C, H, W], got {:?}", vx.shape());
        assert_eq!(vw.rank(), 4, "conv2d expects weight [Cout, Cin, k, k]");
        let (cin, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (cout, k) = (vw.dim(0), vw.dim(2));
        assert_eq!(vw.dim(1), cin, "conv2d channel mismatch: input {cin}, weight {:?}", vw.shape());
        assert!(k % 2 == 1 && vw.dim(3) == k, "conv2d needs odd square kernels");
        let hw = h * wd;
        let kk = cin * k * k;
        let cols: Option<Vec<f64>> = if k == 1 { None } else { Some(im2col(vx.data(), cin, h, wd, k)) };
        let mut out = vec![0.0; cout * hw];
        {
            let cols_ref = cols.as_deref().unwrap_or(vx.data());
            gemm(1.0, MatRef::new(vw.data(), cout, kk), MatRef::new(cols_ref, kk, hw), 0.0, &mut out);
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            let vb = self.value(bv);
            assert_eq!(vb.numel(), cout, "conv2d bias width mismatch");
            for (c, plane) in out.chunks_mut(hw).enumerate() {
                let bias = vb.data()[c];
                plane.iter_mut().for_each(|v| *v += bias);
            }
            parents.push(bv);
        }
        let need_x = self.requires_grad(x);
        self.push(Tensor::new([cout, h, wd], out), &parents, move |g| {
            let gm = MatRef::new(g.data(), cout, hw);
            let cols_ref = cols.as_deref().unwrap_or(vx.data());
            let mut gw = vec![0.0; cout * kk];
            gemm(1.0, gm, MatRef::new(cols_ref, kk, hw).t(), 0.0, &mut gw);
            let mut grads = vec![(w, Tensor::new(vw.shape().to_vec(), gw))];
            if need_x {
                let mut gcols = vec![0.0; kk * hw];
                gemm(1.0, MatRef::new(vw.data(), cout, kk).t(), gm, 0.0, &mut gcols);
                let gx = if k == 1 { gcols } else { col2im(&gcols, cin, h, wd, k) };
                grads.push((x, Tensor::new([cin, h, wd], gx)));
            }
            if let Some(bv) = b {
                let gb: Vec<f64> = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                grads.push((bv, Tensor::new([cout], gb)));
            }
            grads
        })
    }

    /// Non-overlapping `k × k` max pooling; `H` and `W` must divide by `k`.
    pub fn max_pool(&self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        assert!(h % k == 0 && w % k == 0, "max_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; c * oh * ow];
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (ch * h + oy * k + dy) * w + ox * k + dx;
                            if vx.data()[idx] > best {
                                best = vx.data()[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::new([c, oh, ow], out), &[x], move |g| {
            let mut gx = Tensor::zeros(shape);
            for (o, &i) in arg.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
            vec![(x, gx)]
        })
    }

    /// Bilinear resize of `[C, h, w]` to `[C, out_h, out_w]` with half-pixel
    /// alignment.
    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        if (h, w) == (out_h, out_w) {
            return self.push_rc(vx, &[x], move |g| vec![(x, g.clone())]);
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &vx.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    dst[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        self.push(Tensor::new([c, out_h, out_w], out), &[x], move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let gsrc = &g.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                let gdst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gsrc[oy * out_w + ox];
                        gdst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gdst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gdst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        gdst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![(x, Tensor::new([c, h, w], gx))]
        })
    }

    /// Bilinear samples of `map [C, H, W]` at points `pos [N, 2]` given as
    /// `(u, v)` = (column, row) with pixel centers at integers. Returns
    /// `[N, C]`, differentiable with respect to both the map and the points.
    pub fn sample_bilinear(&self, map: Var, pos: Var) -> Var {
        let (vm, vp) = (self.value(map), self.value(pos));
        assert_eq!(vm.rank(), 3, "sample_bilinear expects map [C, H, W]");
        assert!(vp.rank() == 2 && vp.dim(1) == 2, "sample_bilinear expects points [N, 2]");
        let (c, h, w) = (vm.dim(0), vm.dim(1), vm.dim(2));
        let n = vp.dim(0);
        let hw = h * w;
        let cells: Vec<BilinearCell> =
            (0..n).map(|i| BilinearCell::new(vp.data()[2 * i], vp.data()[2 * i + 1], w, h)).collect();
        let mut out = vec![0.0; n * c];
        for (i, cell) in cells.iter().enumerate() {
            let taps = cell.taps(w);
            for ch in 0..c {
                let plane = &vm.data()[ch * hw..(ch + 1) * hw];
                out[i * c + ch] = taps.iter().map(|&(j, wt)| wt * plane[j]).sum();
            }
        }
        let mshape = vm.shape().to_vec();
        self.push(Tensor::new([n, c], out), &[map, pos], move |g| {
            let mut gm = Tensor::zeros(mshape);
            let mut gp = vec![0.0; 2 * n];
            for (i, cell) in cells.iter().enumerate() {
                let taps = cell.taps(w);
                let (fx, fy) = (cell.fx, cell.fy);
                let movable_x = cell.x1 != cell.x0;
                let movable_y = cell.y1 != cell.y0;
                for ch in 0..c {
                    let gv = g.data()[i * c + ch];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane_off = ch * hw;
                    for &(j, wt) in &taps {
                        gm.data_mut()[plane_off + j] += wt * gv;
                    }
                    let plane = &vm.data()[plane_off..plane_off + hw];
                    let v00 = plane[taps[0].0];
                    let v01 = plane[taps[1].0];
                    let v10 = plane[taps[2].0];
                    let v11 = plane[taps[3].0];
                    if movable_x {
                        gp[2 * i] += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    }
                    if movable_y {
                        gp[2 * i + 1] += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
            }
            vec![(map, gm), (pos, Tensor::new([n, 2], gp))]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.value(g.conv2d(xv, wv, None));
        for co in 0..3 {
            for yy in 0..5 {
                for xx in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                    continue;
                                }
                                acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * 5 + sy as usize) * 4 + sx as usize];
                            }
                        }
                    }
                    assert!((y.data()[(co * 5 + yy) * 4 + xx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn image_ops_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let w1 = rand_tensor(&mut rng, &[2, 3, 1, 1]);
        let probe = rand_tensor(&mut rng, &[2, 8, 8]);
        let report = check_gradients(&[x, w, b, w1], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]));
            let y = g.relu(y);
            let y = g.conv2d(y, v[3], None);
            let p = g.max_pool(y, 2);
            let u = g.upsample_bilinear(p, 8, 8);
            let n = g.l2_normalize_channels(u);
            let pr = g.constant(probe.clone());
            g.sum(g.mul(n, pr))
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn token_ops_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[5, 3]);
        let b = rand_tensor(&mut rng, &[5]);
        let probe = rand_tensor(&mut rng, &[4, 5]);
        let report = check_gradients(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let s = g.softmax_cols(y);
            let l = g.log_softmax(y);
            let sm = g.softmax(y);
            let q = g.sigmoid(y);
            let nrm = g.l2_normalize(y);
            let c = g.concat(&[s, l, sm, q, nrm], 1);
            let c = g.slice(c, 1, 2..20);
            let pr = g.constant(Tensor::from_fn([4, 18], |i| probe.data()[i % 20]));
            let r = g.sum_rows(g.mul(c, pr));
            let t = g.sum_cols(g.transpose(g.mul(y, g.constant(probe.clone()))));
            g.add(g.sum(g.norm_rows(g.reshape(r, &[2, 2]))), g.sum(g.mul(t, t)))
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn sampling_passes_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = rand_tensor(&mut rng, &[3, 5, 6]);
        let pos = Tensor::new([3, 2], vec![1.3, 2.7, 4.2, 0.4, 0.6, 3.1]);
        let report = check_gradients(&[map, pos], |g, v| {
            let s = g.sample_bilinear(v[0], v[1]);
            g.sum(g.mul(s, s))
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn quotient_gradient_survives_tiny_denominators() {
        let g = Graph::new();
        let a = g.leaf(Tensor::new([1], vec![3e-200]));
        let b = g.leaf(Tensor::new([1], vec![1e-200]));
        let q = g.div(a, b);
        let grads = g.backward(g.sum(q));
        assert!((grads.get(b).unwrap().data()[0] + 3e200).abs() < 1e188);
        assert!((grads.get(a).unwrap().data()[0] - 1e200).abs() < 1e188);
    }

    #[test]
    fn gradient_reversal_negates_and_scales() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]));
        let y = g.gradient_reversal(x, 0.7);
        assert_eq!(*g.value(y), *g.value(x));
        let grads = g.backward(g.sum(y));
        assert_eq!(grads.get(x).unwrap().data(), &[-0.7, -0.7, -0.7]);
    }
}
