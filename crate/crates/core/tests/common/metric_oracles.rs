//! Straight transcriptions of the published metric definitions, written
//! without reference to the library code, and the random grids they are
//! compared on.

use super::*;
use rfm_core::Tensor;

const EPS: f64 = f64::EPSILON;

pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub p: Vec<Vec<f64>>,
    pub g: Vec<Vec<bool>>,
}

impl Grid {
    pub fn new(pred: &Tensor, gt: &Tensor) -> Self {
        let (h, w) = (gt.dim(1), gt.dim(2));
        Grid {
            h,
            w,
            p: (0..h).map(|y| pred.data()[y * w..(y + 1) * w].to_vec()).collect(),
            g: (0..h)
                .map(|y| gt.data()[y * w..(y + 1) * w].iter().map(|&v| v > 0.5).collect())
                .collect(),
        }
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.h).flat_map(move |y| (0..self.w).map(move |x| (y, x)))
    }
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn s_oracle(gr: &Grid) -> f64 {
    let n = (gr.h * gr.w) as f64;
    let fg_frac = gr.cells().filter(|&(y, x)| gr.g[y][x]).count() as f64 / n;
    let mean_p = gr.cells().map(|(y, x)| gr.p[y][x]).sum::<f64>() / n;
    if fg_frac == 0.0 {
        return 1.0 - mean_p;
    }
    if fg_frac == 1.0 {
        return mean_p;
    }
    let obj = |v: Vec<f64>| {
        let m = avg(&v);
        let sd = if v.len() > 1 {
            (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sd + EPS)
    };
    let fg: Vec<f64> = gr
        .cells()
        .filter(|&(y, x)| gr.g[y][x])
        .map(|(y, x)| gr.p[y][x])
        .collect();
    let bg: Vec<f64> = gr
        .cells()
        .filter(|&(y, x)| !gr.g[y][x])
        .map(|(y, x)| 1.0 - gr.p[y][x])
        .collect();
    let s_obj = fg_frac * obj(fg) + (1.0 - fg_frac) * obj(bg);

    // Centroid in 1-based coordinates, rounded half away from zero.
    let cnt = gr.cells().filter(|&(y, x)| gr.g[y][x]).count() as f64;
    let cx = (gr
        .cells()
        .filter(|&(y, x)| gr.g[y][x])
        .map(|(_, x)| (x + 1) as f64)
        .sum::<f64>()
        / cnt)
        .round() as usize;
    let cy = (gr
        .cells()
        .filter(|&(y, x)| gr.g[y][x])
        .map(|(y, _)| (y + 1) as f64)
        .sum::<f64>()
        / cnt)
        .round() as usize;
    let ssim = |ys: (usize, usize), xs: (usize, usize)| -> Option<(f64, f64)> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for y in ys.0..ys.1 {
            for x in xs.0..xs.1 {
                a.push(gr.p[y][x]);
                b.push(gr.g[y][x] as u8 as f64);
            }
        }
        if a.is_empty() {
            return None;
        }
        let k = a.len() as f64;
        let (ma, mb) = (avg(&a), avg(&b));
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (k - 1.0 + EPS);
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (k - 1.0 + EPS);
        let cov = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / (k - 1.0 + EPS);
        let num = 4.0 * ma * mb * cov;
        let den = (ma * ma + mb * mb) * (va + vb);
        let q = if num != 0.0 {
            num / (den + EPS)
        } else if den == 0.0 {
            1.0
        } else {
            0.0
        };
        Some((k / n, q))
    };
    let s_reg: f64 = [
        ((0, cy), (0, cx)),
        ((0, cy), (cx, gr.w)),
        ((cy, gr.h), (0, cx)),
        ((cy, gr.h), (cx, gr.w)),
    ]
    .into_iter()
    .filter_map(|(ys, xs)| ssim(ys, xs))
    .map(|(wgt, q)| wgt * q)
    .sum();
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

pub fn e_oracle(gr: &Grid) -> f64 {
    let n = (gr.h * gr.w) as f64;
    let mean_p = gr.cells().map(|(y, x)| gr.p[y][x]).sum::<f64>() / n;
    let tau = (2.0 * mean_p).min(1.0);
    let bin = |v: f64| if tau == 0.0 { v > 0.0 } else { v >= tau };
    let fm: Vec<f64> = gr.cells().map(|(y, x)| bin(gr.p[y][x]) as u8 as f64).collect();
    let gt: Vec<f64> = gr.cells().map(|(y, x)| gr.g[y][x] as u8 as f64).collect();
    let fg = gt.iter().sum::<f64>();
    if fg == 0.0 {
        return fm.iter().map(|f| 1.0 - f).sum::<f64>() / n;
    }
    if fg == n {
        return fm.iter().sum::<f64>() / n;
    }
    let (mf, mg) = (avg(&fm), avg(&gt));
    fm.iter()
        .zip(&gt)
        .map(|(f, g)| {
            let (a, b) = (f - mf, g - mg);
            let xi = 2.0 * a * b / (a * a + b * b + EPS);
            (1.0 + xi) * (1.0 + xi) / 4.0
        })
        .sum::<f64>()
        / n
}

pub fn f_oracle(gr: &Grid) -> f64 {
    let (h, w) = (gr.h, gr.w);
    let fgs: Vec<(usize, usize)> = gr.cells().filter(|&(y, x)| gr.g[y][x]).collect();
    if fgs.is_empty() {
        return if gr.cells().all(|(y, x)| gr.p[y][x] == 0.0) {
            1.0
        } else {
            0.0
        };
    }
    let err = |y: usize, x: usize| (gr.p[y][x] - gr.g[y][x] as u8 as f64).abs();
    // Nearest foreground pixel, first in row-major order among equals.
    let nearest = |y: usize, x: usize| -> ((usize, usize), f64) {
        let mut best = (fgs[0], f64::INFINITY);
        for &(fy, fx) in &fgs {
            let d = ((fy as f64 - y as f64).powi(2) + (fx as f64 - x as f64).powi(2)).sqrt();
            if d < best.1 {
                best = ((fy, fx), d);
            }
        }
        best
    };
    let et = |y: usize, x: usize| {
        if gr.g[y][x] {
            err(y, x)
        } else {
            let ((fy, fx), _) = nearest(y, x);
            err(fy, fx)
        }
    };
    let mut k = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            ks += *v;
        }
    }
    let ea = |y: usize, x: usize| {
        let mut s = 0.0;
        for (i, row) in k.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let yy = (y as isize + i as isize - 3).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + j as isize - 3).clamp(0, w as isize - 1) as usize;
                s += v / ks * et(yy, xx);
            }
        }
        s
    };
    let (mut ew_fg, mut fp) = (0.0, 0.0);
    for (y, x) in gr.cells() {
        if gr.g[y][x] {
            ew_fg += err(y, x).min(ea(y, x));
        } else {
            let b = 2.0 - (0.5f64.ln() / 5.0 * nearest(y, x).1).exp();
            fp += err(y, x) * b;
        }
    }
    let nfg = fgs.len() as f64;
    let tp = nfg - ew_fg;
    let r = 1.0 - ew_fg / nfg;
    let p = tp / (EPS + tp + fp);
    2.0 * r * p / (EPS + r + p)
}

pub fn case(seed: u64) -> (Tensor, Tensor) {
    let gt = rand_mask(&[1, 8, 8], [0.0, 0.15, 0.4, 0.7, 1.0][(seed % 5) as usize], seed);
    let pred = match seed % 4 {
        0 => rand_range(&[1, 8, 8], 0.0, 1.0, seed + 1000),
        1 => gt.map(|g| 0.7 * g + 0.1),
        2 => rand_mask(&[1, 8, 8], 0.3, seed + 2000),
        _ => rand_range(&[1, 8, 8], 0.0, 1.0, seed + 3000).map(|v| v * v * v),
    };
    (pred, gt)
}
