//! Overlapped window partition, cross-attention against a reference map, and
//! fold with overlap averaging.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LinearParams, ParamKind, Params};
use crate::tensor::Tensor;

/// Number of windows per axis for window side `k` sliding by `k/2` over `h`.
pub fn window_count(h: usize, k: usize) -> Result<usize> {
    if k == h && h >= 1 {
        return Ok(1);
    }
    if !k.is_multiple_of(2) {
        return Err(Error::WindowTiling { h, k });
    }
    window_count_with_step(h, k, k / 2)
}

fn window_count_with_step(h: usize, k: usize, step: usize) -> Result<usize> {
    if k == h && h >= 1 {
        return Ok(1);
    }
    if k == 0 || k > h || step == 0 || step > k || !(h - k).is_multiple_of(step) {
        return Err(Error::WindowTiling { h, k });
    }
    Ok((h - k) / step + 1)
}

/// Overlapped partition geometry for a square `h×w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub k: usize,
    pub step: usize,
    pub m: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowGrid {
    /// Grid with the standard half-window step.
    pub fn new(h: usize, w: usize, k: usize) -> Result<Self> {
        if k != h && !k.is_multiple_of(2) {
            return Err(Error::WindowTiling { h, k });
        }
        Self::with_step(h, w, k, if k == h { k } else { k / 2 })
    }

    /// Grid with an explicit step, e.g. `step == k` for non-overlapping windows.
    pub fn with_step(h: usize, w: usize, k: usize, step: usize) -> Result<Self> {
        if h != w {
            return Err(Error::shape(
                "WindowGrid",
                format!("feature map must be square, got {h}x{w}"),
            ));
        }
        let m = window_count_with_step(h, k, step)?;
        Ok(Self {
            k,
            step: if m == 1 { k } else { step },
            m,
            h,
            w,
        })
    }

    pub fn count(&self) -> usize {
        self.m * self.m
    }

    /// Top-left pixel of window `idx` in row-major enumeration.
    pub fn origin(&self, idx: usize) -> (usize, usize) {
        ((idx / self.m) * self.step, (idx % self.m) * self.step)
    }

    /// How many windows cover each index along one axis.
    fn axis_coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.h];
        for r in 0..self.m {
            for c in cov.iter_mut().skip(r * self.step).take(self.k) {
                *c += 1;
            }
        }
        cov
    }

    /// Per-pixel coverage counts, row-major `h×w`.
    pub fn coverage(&self) -> Vec<usize> {
        let a = self.axis_coverage();
        let mut out = Vec::with_capacity(self.h * self.w);
        for &r in &a {
            for &c in &a {
                out.push(r * c);
            }
        }
        out
    }
}

fn for_each_window_pixel(grid: &WindowGrid, mut f: impl FnMut(usize, usize, usize)) {
    let kk = grid.k * grid.k;
    for win in 0..grid.count() {
        let (r0, c0) = grid.origin(win);
        for dy in 0..grid.k {
            for dx in 0..grid.k {
                f(win * kk + dy * grid.k + dx, (r0 + dy) * grid.w + c0 + dx, win);
            }
        }
    }
}

/// `[B, C, H, W]` data to `[B·m², C, k, k]` windows.
pub(crate) fn partition_slice(x: &[f64], batch: usize, c: usize, grid: &WindowGrid) -> Vec<f64> {
    let (hw, kk, n) = (grid.h * grid.w, grid.k * grid.k, grid.count());
    let mut out = vec![0.0; batch * n * c * kk];
    for b in 0..batch {
        for_each_window_pixel(grid, |wi, pi, win| {
            let local = wi - win * kk;
            for ch in 0..c {
                out[((b * n + win) * c + ch) * kk + local] = x[(b * c + ch) * hw + pi];
            }
        });
    }
    out
}

/// Adjoint of [`partition_slice`]: scatter-add windows back onto the map.
pub(crate) fn partition_adjoint(g: &[f64], batch: usize, c: usize, grid: &WindowGrid) -> Vec<f64> {
    let (hw, kk, n) = (grid.h * grid.w, grid.k * grid.k, grid.count());
    let mut out = vec![0.0; batch * c * hw];
    for b in 0..batch {
        for_each_window_pixel(grid, |wi, pi, win| {
            let local = wi - win * kk;
            for ch in 0..c {
                out[(b * c + ch) * hw + pi] += g[((b * n + win) * c + ch) * kk + local];
            }
        });
    }
    out
}

/// `[B·m², C, k, k]` windows to `[B, C, H, W]`, averaging overlaps.
pub(crate) fn fold_slice(x: &[f64], batch: usize, c: usize, grid: &WindowGrid) -> Vec<f64> {
    let mut out = partition_adjoint(x, batch, c, grid);
    let cov = grid.coverage();
    for plane in out.chunks_mut(grid.h * grid.w) {
        plane.iter_mut().zip(&cov).for_each(|(v, &n)| *v /= n as f64);
    }
    out
}

/// Adjoint of [`fold_slice`].
pub(crate) fn fold_adjoint(g: &[f64], batch: usize, c: usize, grid: &WindowGrid) -> Vec<f64> {
    let cov = grid.coverage();
    let mut scaled = g.to_vec();
    for plane in scaled.chunks_mut(grid.h * grid.w) {
        plane.iter_mut().zip(&cov).for_each(|(v, &n)| *v /= n as f64);
    }
    partition_slice(&scaled, batch, c, grid)
}

/// Windows of one feature map together with the grid that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStack {
    /// `[m², C, k, k]`
    pub windows: Tensor,
    pub grid: WindowGrid,
}

fn chw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

pub fn partition_overlapped(x: &Tensor, k: usize) -> Result<WindowStack> {
    let (c, h, w) = chw("partition_overlapped", x)?;
    let grid = WindowGrid::new(h, w, k)?;
    let data = partition_slice(x.data(), 1, c, &grid);
    Ok(WindowStack {
        windows: Tensor::new(vec![grid.count(), c, k, k], data)?,
        grid,
    })
}

pub fn fold_average(stack: &WindowStack) -> Result<Tensor> {
    let grid = &stack.grid;
    match *stack.windows.shape() {
        [n, c, kh, kw] if n == grid.count() && kh == grid.k && kw == grid.k => {
            let data = fold_slice(stack.windows.data(), 1, c, grid);
            Tensor::new(vec![c, grid.h, grid.w], data)
        }
        ref s => Err(Error::shape(
            "fold_average",
            format!(
                "stack {s:?} inconsistent with {}x{} windows of side {}",
                grid.m, grid.m, grid.k
            ),
        )),
    }
}

/// Head split of a `C`-wide attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d: channels / heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.d
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

impl AttentionParams {
    pub fn new(name: &str, channels: usize, seed: u64) -> Self {
        let lin = |n: &str| LinearParams::new(&format!("{name}.{n}"), channels, channels, seed);
        Self {
            wq: lin("wq"),
            wk: lin("wk"),
            wv: lin("wv"),
            wo: lin("wo"),
        }
    }
}

impl Params for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            l.visit_mut(f);
        }
    }
}

/// Tokens `[B, N, C]` split into heads as `[B·heads, N, d]`.
fn split_heads(g: &mut Graph, x: Var, cfg: AttentionConfig) -> Result<Var> {
    let (b, n) = (g.shape(x)[0], g.shape(x)[1]);
    let x = g.reshape(x, &[b, n, cfg.heads, cfg.d])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * cfg.heads, n, cfg.d])
}

fn project(g: &mut Graph, x: Var, lin: &LinearParams) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = lin.forward(g, flat)?;
    let c_out = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], c_out])
}

/// Multi-head cross-attention of query tokens `[B, Nq, C]` against key/value
/// tokens `[B, Nk, C]`. Returns the projected output `[B, Nq, C]` and the
/// attention weights `[B·heads, Nq, Nk]`.
pub fn attend(g: &mut Graph, queries: Var, keys: Var, cfg: AttentionConfig, p: &AttentionParams) -> Result<(Var, Var)> {
    let (qs, ks) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != cfg.channels() || ks[2] != cfg.channels() {
        return Err(Error::shape(
            "cross_attention",
            format!("queries {qs:?}, keys {ks:?}, {} heads of width {}", cfg.heads, cfg.d),
        ));
    }
    let (b, nq) = (qs[0], qs[1]);
    let q = project(g, queries, &p.wq)?;
    let k = project(g, keys, &p.wk)?;
    let v = project(g, keys, &p.wv)?;
    let (q, k, v) = (
        split_heads(g, q, cfg)?,
        split_heads(g, k, cfg)?,
        split_heads(g, v, cfg)?,
    );
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (cfg.d as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let o = g.bmm(attn, v, false)?;
    let o = g.reshape(o, &[b, cfg.heads, nq, cfg.d])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, nq, cfg.channels()])?;
    Ok((project(g, o, &p.wo)?, attn))
}

/// `[B, C, H, W]` to tokens `[B, H·W, C]`.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

/// Tokens `[B, H·W, C]` back to `[B, C, H, W]`.
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let x = g.permute(t, &[0, 2, 1])?;
    g.reshape(x, &[s[0], s[2], h, w])
}

/// Overlapped-window cross-attention of `x: [B, C, H, W]` against the full
/// reference map `r: [B, C, H', W']`, folded back to `[B, C, H, W]`.
///
/// All windows of one image attend to the same keys, so their query tokens
/// are concatenated into one attention call per image.
pub fn windowed_cross_attention(
    g: &mut Graph,
    x: Var,
    r: Var,
    grid: WindowGrid,
    cfg: AttentionConfig,
    p: &AttentionParams,
) -> Result<Var> {
    let b = g.shape(x)[0];
    let c = g.shape(x)[1];
    let (n, kk) = (grid.count(), grid.k * grid.k);
    let wins = g.partition(x, grid)?;
    let q = g.reshape(wins, &[b * n, c, kk])?;
    let q = g.permute(q, &[0, 2, 1])?;
    let q = g.reshape(q, &[b, n * kk, c])?;
    let kv = to_tokens(g, r)?;
    let (o, _) = attend(g, q, kv, cfg, p)?;
    let o = g.reshape(o, &[b * n, kk, c])?;
    let o = g.permute(o, &[0, 2, 1])?;
    let o = g.reshape(o, &[b * n, c, grid.k, grid.k])?;
    g.fold(o, grid)
}

/// Cross-attention of one window `[C, k, k]` against a reference `[C, H, W]`.
pub fn cross_attention(win: &Tensor, reference: &Tensor, cfg: AttentionConfig, p: &AttentionParams) -> Result<Tensor> {
    Ok(cross_attention_with_weights(win, reference, cfg, p)?.0)
}

/// As [`cross_attention`], also returning per-head weights `[heads, k², H·W]`.
pub fn cross_attention_with_weights(
    win: &Tensor,
    reference: &Tensor,
    cfg: AttentionConfig,
    p: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let (c, kh, kw) = chw("cross_attention", win)?;
    let (cr, h, w) = chw("cross_attention", reference)?;
    if c != cr {
        return Err(Error::shape(
            "cross_attention",
            format!("window has {c} channels, reference {cr}"),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(win.detached().reshape(&[1, c, kh, kw])?)?;
    let r = g.input(reference.detached().reshape(&[1, c, h, w])?)?;
    let q = to_tokens(&mut g, x)?;
    let kv = to_tokens(&mut g, r)?;
    let (o, attn) = attend(&mut g, q, kv, cfg, p)?;
    let o = from_tokens(&mut g, o, kh, kw)?;
    Ok((g.value(o).detached().reshape(&[c, kh, kw])?, g.value(attn).detached()))
}

/// Partition → per-window cross-attention → fold for a single `[C, H, W]` map.
pub fn overlapped_cross_attention(
    x: &Tensor,
    reference: &Tensor,
    k: usize,
    cfg: AttentionConfig,
    p: &AttentionParams,
) -> Result<Tensor> {
    let (c, h, w) = chw("overlapped_cross_attention", x)?;
    let (cr, hr, wr) = chw("overlapped_cross_attention", reference)?;
    let grid = WindowGrid::new(h, w, k)?;
    let mut g = Graph::new();
    let xv = g.input(x.detached().reshape(&[1, c, h, w])?)?;
    let rv = g.input(reference.detached().reshape(&[1, cr, hr, wr])?)?;
    let o = windowed_cross_attention(&mut g, xv, rv, grid, cfg, p)?;
    g.value(o).detached().reshape(&[c, h, w])
}
