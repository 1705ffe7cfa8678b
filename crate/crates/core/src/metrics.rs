//! Structure measure, adaptive enhanced-alignment measure, weighted F-measure
//! and mean absolute error, with dataset-level aggregation.
//!
//! Conventions follow the reference MATLAB evaluation code, with three
//! documented departures that keep every score inside `[0, 1]`:
//! predictions are not min-max rescaled, the E-measure divides by the pixel
//! count `N` rather than `N − 1`, and an all-background ground truth gives
//! `F = 1` for an all-zero prediction and `F = 0` otherwise.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// MATLAB's `eps`.
const EPS: f64 = f64::EPSILON;
/// Weight of the object term in the structure measure.
pub const S_ALPHA: f64 = 0.5;
/// Side and standard deviation of the weighted-F Gaussian.
pub const WF_WINDOW: usize = 7;
pub const WF_SIGMA: f64 = 5.0;
/// Distance at which the background error weight reaches 1.5.
pub const WF_DECAY: f64 = 5.0;
pub const WF_BETA2: f64 = 1.0;

fn plane(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = match *gt.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(Error::shape(op, format!("expected [1,H,W] ground truth, got {s:?}"))),
    };
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()),
        ));
    }
    if h * w == 0 {
        return Err(Error::shape(op, "empty image".to_string()));
    }
    Ok((h, w))
}

fn is_fg(g: f64) -> bool {
    g > 0.5
}

/// Mean absolute difference.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    plane("mae", pred, gt)?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.numel() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_sample(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_sample(values) + EPS)
}

fn s_object(p: &[f64], g: &[f64]) -> f64 {
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &g)| is_fg(g)).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(g)
        .filter(|(_, &g)| !is_fg(g))
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / p.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Half-away-from-zero rounding, as MATLAB's `round`.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// 1-based centroid `(X, Y)` of the foreground; the image centre when empty.
pub fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.iter().filter(|&&v| is_fg(v)).count() as f64;
    if total == 0.0 {
        return (round_half_away(w as f64 / 2.0), round_half_away(h as f64 / 2.0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if is_fg(g[y * w + x]) {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (round_half_away(sx / total), round_half_away(sy / total))
}

fn block(v: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        out.extend_from_slice(&v[y * w + cols.start..y * w + cols.end]);
    }
    out
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let d = n - 1.0 + EPS;
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let gb: Vec<f64> = g.iter().map(|&v| is_fg(v) as u8 as f64).collect();
    let (cx, cy) = centroid(g, h, w);
    let area = (h * w) as f64;
    let quads = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut q = 0.0;
    for (rows, cols) in quads {
        let weight = (rows.len() * cols.len()) as f64 / area;
        // an empty quadrant carries zero weight
        if weight > 0.0 {
            q += weight * ssim(&block(p, w, rows.clone(), cols.clone()), &block(&gb, w, rows, cols));
        }
    }
    q
}

/// Structure measure `α·S_object + (1 − α)·S_region`, clamped at 0.
pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = plane("s_measure", pred, gt)?;
    let (p, g) = (pred.data(), gt.data());
    let y = g.iter().filter(|&&v| is_fg(v)).count() as f64 / g.len() as f64;
    Ok(if y == 0.0 {
        1.0 - mean(p)
    } else if y == 1.0 {
        mean(p)
    } else {
        (S_ALPHA * s_object(p, g) + (1.0 - S_ALPHA) * s_region(p, g, h, w)).max(0.0)
    })
}

/// Binarization threshold `min(2·mean(pred), 1)`.
pub fn adaptive_threshold(pred: &Tensor) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// Enhanced-alignment score of `pred` binarized at the adaptive threshold
/// (`pred ≥ τ`; an all-zero prediction stays all-background).
pub fn adaptive_e_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    plane("adaptive_e_measure", pred, gt)?;
    let tau = adaptive_threshold(pred);
    let fm: Vec<f64> = pred
        .data()
        .iter()
        .map(|&p| if tau > 0.0 { p >= tau } else { p > 0.0 } as u8 as f64)
        .collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| is_fg(v) as u8 as f64).collect();
    let n = g.len() as f64;
    let fg = g.iter().sum::<f64>();
    let enhanced: f64 = if fg == 0.0 {
        fm.iter().map(|f| 1.0 - f).sum()
    } else if fg == n {
        fm.iter().sum()
    } else {
        let mf = mean(&fm);
        let mg = fg / n;
        fm.iter()
            .zip(&g)
            .map(|(f, g)| {
                let (a, b) = (f - mf, g - mg);
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    Ok(enhanced / n)
}

/// Normalized `size × size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Correlation with replicated borders, output the same size as the input.
/// Replication (rather than zero padding) keeps a uniform error map uniform,
/// so an all-zero prediction has exactly zero recall.
fn filter_same(x: &[f64], h: usize, w: usize, k: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = clamp(y + dy, h);
                for dx in -r..=r {
                    let sx = clamp(xx + dx, w);
                    acc += k[((dy + r) as usize) * size + (dx + r) as usize] * x[sy * w + sx];
                }
            }
            out[y as usize * w + xx as usize] = acc;
        }
    }
    out
}

/// Euclidean distance from every pixel to its nearest foreground pixel, and
/// that pixel's index. Ties go to the smallest row-major index.
pub fn distance_transform(g: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg: Vec<usize> = (0..h * w).filter(|&i| g[i]).collect();
    exec::map_indexed(h * w, |i| {
        if g[i] {
            return (0.0, i);
        }
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, usize::MAX);
        for &j in &fg {
            let (dy, dx) = ((j / w) as i64 - y, (j % w) as i64 - x);
            let d2 = dy * dy + dx * dx;
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        ((best.0 as f64).sqrt(), best.1)
    })
    .into_iter()
    .unzip()
}

/// Weighted F-measure with `β² = 1`.
pub fn weighted_f_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = plane("weighted_f_measure", pred, gt)?;
    let g: Vec<bool> = gt.data().iter().map(|&v| is_fg(v)).collect();
    let p = pred.data();
    if !g.iter().any(|&b| b) {
        return Ok(if p.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 });
    }
    let e: Vec<f64> = p.iter().zip(&g).map(|(&p, &g)| (p - g as u8 as f64).abs()).collect();
    let (dist, idx) = distance_transform(&g, h, w);
    // background errors are pulled from the nearest foreground pixel
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();
    let ea = filter_same(&et, h, w, &gaussian_kernel(WF_WINDOW, WF_SIGMA), WF_WINDOW);
    let (mut sum_fg_err, mut fp, mut n_fg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            sum_fg_err += m;
            n_fg += 1.0;
        } else {
            let b = 2.0 - ((0.5f64).ln() / WF_DECAY * dist[i]).exp();
            fp += e[i] * b;
        }
    }
    let tp = n_fg - sum_fg_err;
    let r = 1.0 - sum_fg_err / n_fg;
    let prec = tp / (EPS + tp + fp);
    Ok((1.0 + WF_BETA2) * r * prec / (EPS + r + WF_BETA2 * prec))
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub s_alpha: f64,
    pub adaptive_e: f64,
    pub weighted_f: f64,
    pub mae: f64,
}

pub fn score_image(name: &str, pred: &Tensor, gt: &Tensor) -> Result<ImageScores> {
    Ok(ImageScores {
        name: name.to_string(),
        s_alpha: s_measure(pred, gt)?,
        adaptive_e: adaptive_e_measure(pred, gt)?,
        weighted_f: weighted_f_measure(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub adaptive_e: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub per_image: Vec<ImageScores>,
    pub n_images: usize,
}

pub const CONVENTIONS: &str = "S: alpha 0.5, all-background gt scores 1 - mean(pred); \
E: threshold min(2 mean, 1), pred >= t, mean over N pixels; \
F: beta2 1, 7x7 sigma 5 Gaussian, all-background gt scores 1 only for an all-zero pred; \
M: mean absolute error; no min-max rescaling of predictions";

impl MetricReport {
    /// Means accumulated in list order.
    pub fn from_scores(per_image: Vec<ImageScores>) -> Self {
        let n = per_image.len();
        let avg = |f: fn(&ImageScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            s_alpha: avg(|s| s.s_alpha),
            adaptive_e: avg(|s| s.adaptive_e),
            weighted_f: avg(|s| s.weighted_f),
            mae: avg(|s| s.mae),
            n_images: n,
            per_image,
        }
    }

    /// `key = value` lines; floats use the shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let mut out = format!("# {CONVENTIONS}\n");
        let _ = writeln!(out, "n_images = {}", self.n_images);
        let _ = writeln!(out, "s_alpha = {}", self.s_alpha);
        let _ = writeln!(out, "adaptive_e = {}", self.adaptive_e);
        let _ = writeln!(out, "weighted_f = {}", self.weighted_f);
        let _ = writeln!(out, "mae = {}", self.mae);
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "image.{} = {} {} {} {}",
                s.name, s.s_alpha, s.adaptive_e, s.weighted_f, s.mae
            );
        }
        out
    }

    pub fn table_header() -> String {
        format!("{:<24} {:>7} {:>7} {:>7} {:>7}", "model", "S_a↑", "aE↑", "F^w_b↑", "M↓")
    }

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            label, self.s_alpha, self.adaptive_e, self.weighted_f, self.mae
        )
    }

    pub fn to_table(&self, label: &str) -> String {
        format!("{}\n{}\n", Self::table_header(), self.table_row(label))
    }
}

/// Scores `(name, pred, gt)` triples in parallel, aggregating in list order.
pub fn evaluate_pairs(items: &[(String, Tensor, Tensor)]) -> Result<MetricReport> {
    let scores = exec::map_slice(items, |(n, p, g)| score_image(n, p, g));
    Ok(MetricReport::from_scores(scores.into_iter().collect::<Result<_>>()?))
}
