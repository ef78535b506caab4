//! Dense numeric kernels behind the tape primitives. Every linear kernel
//! comes with its exact adjoint so that vector-Jacobian products can be
//! expressed with the same primitive set.

use alloc::vec;
use alloc::vec::Vec;
// Unused when std is linked (tests), whose inherent float methods take precedence.
#[allow(unused_imports)]
use num_traits::Float;

use super::tensor::{Shape, Tensor};
use crate::fields::diff_line;

/// Patch matrix of one sample: row `(c, a, b)`, column `i·W + j` holds
/// `x[c, i + a − kh/2, j + b − kw/2]`, zero outside the raster.
fn im2col(x: &[f64], ci: usize, h: usize, wd: usize, kh: usize, kw: usize) -> Vec<f64> {
    let hw = h * wd;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut cols = Vec::with_capacity(ci * kh * kw * hw);
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for a in 0..kh {
            let dy = a as isize - ph;
            for b in 0..kw {
                let dx = b as isize - pw;
                let j0 = (-dx).clamp(0, wd as isize) as usize;
                let j1 = (wd as isize - dx).clamp(j0 as isize, wd as isize) as usize;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        cols.resize(cols.len() + wd, 0.0);
                        continue;
                    }
                    let s0 = (si as usize * wd) as isize + j0 as isize + dx;
                    cols.resize(cols.len() + j0, 0.0);
                    cols.extend_from_slice(&plane[s0 as usize..s0 as usize + (j1 - j0)]);
                    cols.resize(cols.len() + wd - j1, 0.0);
                }
            }
        }
    }
    cols
}

/// `C ← A·B + beta·C` for row-major `A: m×k`, `C: m×n` and `B` given by its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && c.len() >= m * n && b.len() >= k * n);
    // SAFETY: the slices cover every index addressed by the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Zero-padded "same" 2-D cross-correlation, stride 1, odd kernels.
/// `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]` → `[N, Co, H, W]`.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let [co, _, kh, kw] = w.shape().0;
    let (hw, k) = (h * wd, ci * kh * kw);
    let mut out = Tensor::zeros(Shape::new(n, co, h, wd));
    for b in 0..n {
        let cols = im2col(&x.data()[b * ci * hw..(b + 1) * ci * hw], ci, h, wd, kh, kw);
        gemm(co, k, hw, w.data(), &cols, hw as isize, 1, 0.0, &mut out.data_mut()[b * co * hw..(b + 1) * co * hw]);
    }
    out
}

/// Gradient of [`conv2d`] with respect to its kernel:
/// `G[o,c,a,b] = Σ_{n,i,j} v[n,o,i,j] · x[n,c,i+a-p,j+b-p]`.
pub fn conv_weight_grad(x: &Tensor, v: &Tensor, kh: usize, kw: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let co = v.shape().c();
    let (hw, k) = (h * wd, ci * kh * kw);
    let mut out = Tensor::zeros(Shape::new(co, ci, kh, kw));
    for b in 0..n {
        let cols = im2col(&x.data()[b * ci * hw..(b + 1) * ci * hw], ci, h, wd, kh, kw);
        // V_b · colsᵀ, the transpose expressed through strides
        gemm(co, hw, k, &v.data()[b * co * hw..(b + 1) * co * hw], &cols, 1, hw as isize, 1.0, out.data_mut());
    }
    out
}

/// Swaps the channel axes and rotates each kernel by 180°. An involution;
/// `conv2d(v, kernel_flip(w))` is the input-gradient of `conv2d(·, w)`.
pub fn kernel_flip(w: &Tensor) -> Tensor {
    let [co, ci, kh, kw] = w.shape().0;
    let mut out = Tensor::zeros(Shape::new(ci, co, kh, kw));
    let wd = w.data();
    let od = out.data_mut();
    for o in 0..co {
        for c in 0..ci {
            for a in 0..kh {
                for b in 0..kw {
                    od[((c * co + o) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)] = wd[((o * ci + c) * kh + a) * kw + b];
                }
            }
        }
    }
    out
}

pub fn avgpool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let ip = &xd[p * h * w..(p + 1) * h * w];
        let op = &mut od[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let s = ip[2 * i * w + 2 * j] + ip[2 * i * w + 2 * j + 1] + ip[(2 * i + 1) * w + 2 * j] + ip[(2 * i + 1) * w + 2 * j + 1];
                op[i * wo + j] = 0.25 * s;
            }
        }
    }
    out
}

pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                od[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

/// Interpolation taps `(i0, i1, t)` for doubling an axis of length `n`
/// (half-pixel centres, edge clamped).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let ip = &xd[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, sy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, sx)) in tx.iter().enumerate() {
                let top = (1.0 - sx) * ip[y0 * w + x0] + sx * ip[y0 * w + x1];
                let bot = (1.0 - sx) * ip[y1 * w + x0] + sx * ip[y1 * w + x1];
                od[p * ho * wo + i * wo + j] = (1.0 - sy) * top + sy * bot;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear2`]: `[N,C,2H,2W]` → `[N,C,H,W]`.
pub fn upsample_bilinear2_adj(v: &Tensor) -> Tensor {
    let [n, c, ho, wo] = v.shape().0;
    let (h, w) = (ho / 2, wo / 2);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let mut out = Tensor::zeros(Shape::new(n, c, h, w));
    let vd = v.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let op = &mut od[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, sy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, sx)) in tx.iter().enumerate() {
                let g = vd[p * ho * wo + i * wo + j];
                op[y0 * w + x0] += (1.0 - sy) * (1.0 - sx) * g;
                op[y0 * w + x1] += (1.0 - sy) * sx * g;
                op[y1 * w + x0] += sy * (1.0 - sx) * g;
                op[y1 * w + x1] += sy * sx * g;
            }
        }
    }
    out
}

/// Spatial derivative along W (`axis_x = true`) or H, per plane.
pub fn diff(x: &Tensor, h_step: f64, axis_x: bool) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        if axis_x {
            for i in 0..h {
                diff_line(x.data(), od, base + i * w, 1, w, h_step);
            }
        } else {
            for j in 0..w {
                diff_line(x.data(), od, base + j, w, h, h_step);
            }
        }
    }
    out
}

fn diff_line_adj(v: &[f64], g: &mut [f64], offset: usize, stride: usize, n: usize, h: f64) {
    if n < 2 {
        return;
    }
    let at = |i: usize| offset + i * stride;
    g[at(0)] -= v[at(0)] / h;
    g[at(1)] += v[at(0)] / h;
    for i in 1..n - 1 {
        g[at(i + 1)] += v[at(i)] / (2.0 * h);
        g[at(i - 1)] -= v[at(i)] / (2.0 * h);
    }
    g[at(n - 1)] += v[at(n - 1)] / h;
    g[at(n - 2)] -= v[at(n - 1)] / h;
}

/// Adjoint of [`diff`].
pub fn diff_adj(v: &Tensor, h_step: f64, axis_x: bool) -> Tensor {
    let [n, c, h, w] = v.shape().0;
    let mut out = Tensor::zeros(v.shape());
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        if axis_x {
            for i in 0..h {
                diff_line_adj(v.data(), od, base + i * w, 1, w, h_step);
            }
        } else {
            for j in 0..w {
                diff_line_adj(v.data(), od, base + j, w, h, h_step);
            }
        }
    }
    out
}

/// `[N,C,H,W]` → `[1,C,1,1]`, summing batch and space.
pub fn channel_sum(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape().0;
    let plane = x.shape().plane();
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (k, o) in out.iter_mut().enumerate() {
            *o += x.data()[(b * c + k) * plane..(b * c + k + 1) * plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, c, 1, 1), out).expect("channel sum")
}

/// `[1,C,1,1]` → `shape`, repeating each channel value.
pub fn broadcast_channel(b: &Tensor, shape: Shape) -> Tensor {
    let [n, c, _, _] = shape.0;
    let plane = shape.plane();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for bi in 0..n {
        for k in 0..c {
            let v = b.data()[k];
            od[(bi * c + k) * plane..(bi * c + k + 1) * plane].iter_mut().for_each(|o| *o = v);
        }
    }
    out
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape().0;
    let cb = b.shape().c();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for bi in 0..n {
        data.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Tensor::from_vec(Shape::new(n, ca + cb, h, w), data).expect("concat")
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for bi in 0..n {
        data.extend_from_slice(&x.data()[(bi * c + start) * plane..(bi * c + start + len) * plane]);
    }
    Tensor::from_vec(Shape::new(n, len, h, w), data).expect("slice")
}

/// Places `x` at channel offset `start` in a zero tensor with `total` channels.
pub fn embed_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let [n, len, h, w] = x.shape().0;
    let plane = h * w;
    let mut out = Tensor::zeros(Shape::new(n, total, h, w));
    let od = out.data_mut();
    for bi in 0..n {
        od[(bi * total + start) * plane..(bi * total + start + len) * plane]
            .copy_from_slice(&x.data()[bi * len * plane..(bi + 1) * len * plane]);
    }
    out
}
