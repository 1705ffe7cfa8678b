//! Slice-level numeric kernels shared by the graph ops.
//!
//! Nothing here allocates a graph or checks shapes beyond debug assertions;
//! callers in [`crate::graph`] own validation.

use crate::exec;

/// `c += op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
/// `ta`/`tb` select whether `a`/`b` are stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut col = vec![0.0; g.col_rows() * ho * wo];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution with per-output-channel bias. `x` is `[B, C_in, H, W]`.
pub fn conv2d_forward(x: &[f64], batch: usize, w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.out_h() * g.out_w();
    let out_len = g.c_out * hw_out;
    let mut out = vec![0.0; batch * out_len];
    exec::for_each_chunk_mut(&mut out, out_len, |b, ob| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for (co, row) in ob.chunks_mut(hw_out).enumerate() {
            row.fill(bias[co]);
        }
        if g.is_pointwise() {
            gemm(false, false, g.c_out, hw_out, g.c_in, w, xb, ob);
        } else {
            let col = im2col(xb, g);
            gemm(false, false, g.c_out, hw_out, g.col_rows(), w, &col, ob);
        }
    });
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, dbias)`.
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.out_h() * g.out_w();
    let out_len = g.c_out * hw_out;
    let rows = g.col_rows();
    let parts = exec::map_indexed(batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db = &dout[b * out_len..(b + 1) * out_len];
        let mut dwb = vec![0.0; g.c_out * rows];
        let mut dxb = vec![0.0; in_len];
        if g.is_pointwise() {
            gemm(false, true, g.c_out, rows, hw_out, db, xb, &mut dwb);
            gemm(true, false, g.c_in, hw_out, g.c_out, w, db, &mut dxb);
        } else {
            let col = im2col(xb, g);
            gemm(false, true, g.c_out, rows, hw_out, db, &col, &mut dwb);
            let mut dcol = vec![0.0; rows * hw_out];
            gemm(true, false, rows, hw_out, g.c_out, w, db, &mut dcol);
            col2im(&dcol, g, &mut dxb);
        }
        let dbias: Vec<f64> = db.chunks(hw_out).map(|r| r.iter().sum()).collect();
        (dxb, dwb, dbias)
    });
    let mut dx = Vec::with_capacity(batch * in_len);
    let mut dw = vec![0.0; g.c_out * rows];
    let mut dbias = vec![0.0; g.c_out];
    for (dxb, dwb, dbb) in parts {
        dx.extend_from_slice(&dxb);
        dw.iter_mut().zip(&dwb).for_each(|(a, b)| *a += b);
        dbias.iter_mut().zip(&dbb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, dbias)
}

/// Per-output-coordinate source taps for half-pixel bilinear resampling.
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut taps = LinearTaps {
            i0: Vec::with_capacity(n_out),
            i1: Vec::with_capacity(n_out),
            frac: Vec::with_capacity(n_out),
        };
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            taps.i0.push(i0);
            taps.i1.push(i1);
            taps.frac.push(src - i0 as f64);
        }
        taps
    }
}

/// Bilinear resampling of `planes` independent `h×w` planes to `oh×ow`.
pub fn bilinear_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    exec::for_each_chunk_mut(&mut out, oh * ow, |p, op| {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.i0[oy], ty.i1[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                let top = (1.0 - fx) * xp[y0 * w + x0] + fx * xp[y0 * w + x1];
                let bot = (1.0 - fx) * xp[y1 * w + x0] + fx * xp[y1 * w + x1];
                op[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    });
    out
}

pub fn bilinear_backward(dout: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = LinearTaps::new(h, oh);
    let tx = LinearTaps::new(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |p, dp| {
        let gp = &dout[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.i0[oy], ty.i1[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                let gv = gp[oy * ow + ox];
                dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                dp[y1 * w + x1] += gv * fy * fx;
            }
        }
    });
    dx
}

/// Row-wise softmax over rows of length `n`, stabilized by the row maximum.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Stride-1 zero-padded `k×k` mean over an `h×w` plane, divisor `k²` everywhere.
pub fn avg_pool_same(x: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    // Separable box sums; zero padding keeps the divisor at k² on borders.
    let mut horiz = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..w {
            let mut s = 0.0;
            for dx in -r..=r {
                let xx = xo as isize + dx;
                if xx >= 0 && xx < w as isize {
                    s += x[y * w + xx as usize];
                }
            }
            horiz[y * w + xo] = s;
        }
    }
    let norm = (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for yo in 0..h {
        for xo in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = yo as isize + dy;
                if yy >= 0 && yy < h as isize {
                    s += horiz[yy as usize * w + xo];
                }
            }
            out[yo * w + xo] = s / norm;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
