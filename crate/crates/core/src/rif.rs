//! Reference information fusion: merging reference features, image-reference
//! fusion through overlapped-window cross-attention, text-reference fusion
//! through per-pixel sentence attention, and per-level dispatch.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::model::FeaturePyramid;
use crate::nn::{ConvBlockParams, LinearParams, ParamKind, Params, ScalarParam};
use crate::owca::{self, AttentionConfig, AttentionParams, WindowGrid};
use crate::tensor::Tensor;

/// Levels that may receive reference information (1-based).
pub const FUSABLE_LEVELS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    None,
    Image,
    Text,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "image" => Ok(Self::Image),
            "text" => Ok(Self::Text),
            other => Err(Error::Config(format!(
                "fusion kind must be none|image|text, got {other:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Image => "image",
            Self::Text => "text",
        }
    }
}

/// Reference information for one camouflaged image.
#[derive(Clone, Debug)]
pub enum ReferenceBundle {
    /// K reference feature pyramids; level 1 may be absent.
    Image { pyramids: Vec<FeaturePyramid> },
    /// `[N, C_t]` sentence embeddings.
    Text { embeddings: Tensor },
}

/// Window side per fusable level: `H_2`, `H_3/2`, `H_4/4`, falling back to a
/// single window wherever that gives a side below 2.
pub fn default_windows(sizes: [usize; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for (i, (&h, div)) in sizes.iter().zip([1, 2, 4]).enumerate() {
        let k = h / div;
        out[i] = if k < 2 { h } else { k };
    }
    out
}

/// Image-reference fusion parameters of one level.
#[derive(Clone, Debug)]
pub struct RifSLevel {
    pub level: usize,
    pub attn_cfg: AttentionConfig,
    pub attn: AttentionParams,
    pub alpha: ScalarParam,
    /// `K·C → C` pointwise block over the concatenated references.
    pub merge: ConvBlockParams,
    pub out: ConvBlockParams,
}

impl RifSLevel {
    pub fn new(level: usize, channels: usize, num_refs: usize, heads: usize, seed: u64) -> Result<Self> {
        if num_refs == 0 {
            return Err(Error::InvalidArgument(
                "image fusion needs at least one reference".into(),
            ));
        }
        let p = format!("rif_s.l{level}");
        Ok(Self {
            level,
            attn_cfg: AttentionConfig::new(channels, heads)?,
            attn: AttentionParams::new(&format!("{p}.attn"), channels, seed),
            alpha: ScalarParam::new(&format!("{p}.alpha"), 0.5),
            merge: ConvBlockParams::new(&format!("{p}.merge"), num_refs * channels, channels, 1, seed),
            out: ConvBlockParams::new(&format!("{p}.out"), channels, channels, 1, seed),
        })
    }

    pub fn num_refs(&self) -> usize {
        self.merge.c_in() / self.out.c_out()
    }

    /// `refs: [B·K, C, H, W]` (reference-major within each sample) to the
    /// merged `[B, C, H, W]`.
    pub fn merge_graph(&self, g: &mut Graph, refs: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(refs).to_vec();
        let k = self.num_refs();
        if s.len() != 4 || !s[0].is_multiple_of(k) || s[1] * k != self.merge.c_in() {
            return Err(Error::shape(
                "merge_reference_features",
                format!("{s:?} with {k} references per sample"),
            ));
        }
        let cat = g.reshape(refs, &[s[0] / k, k * s[1], s[2], s[3]])?;
        self.merge.forward(g, cat, mode)
    }

    /// `Conv1(α·E + (1−α)·f_x)` with `E` the folded window attention of `fx`
    /// against the merged reference `fs`.
    pub fn fuse_graph(&self, g: &mut Graph, fx: Var, fs: Var, grid: WindowGrid, mode: Mode) -> Result<Var> {
        let e = owca::windowed_cross_attention(g, fx, fs, grid, self.attn_cfg, &self.attn)?;
        let alpha = self.alpha.bind(g)?;
        let blended = g.blend(alpha, e, fx)?;
        self.out.forward(g, blended, mode)
    }
}

impl Params for RifSLevel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.attn.visit(f);
        self.alpha.visit(f);
        self.merge.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.attn.visit_mut(f);
        self.alpha.visit_mut(f);
        self.merge.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Text-reference fusion parameters of one level.
#[derive(Clone, Debug)]
pub struct RifTLevel {
    pub level: usize,
    pub text_proj: LinearParams,
    /// `2·C → C` pointwise block over `[f_x ; enhancement]`.
    pub fuse: ConvBlockParams,
}

impl RifTLevel {
    pub fn new(level: usize, channels: usize, text_dim: usize, seed: u64) -> Self {
        let p = format!("rif_t.l{level}");
        Self {
            level,
            text_proj: LinearParams::new(&format!("{p}.text_proj"), text_dim, channels, seed),
            fuse: ConvBlockParams::new(&format!("{p}.fuse"), 2 * channels, channels, 1, seed),
        }
    }

    /// Per-pixel sentence weights `[B, H·W, N]` and the fused `[B, C, H, W]`.
    pub fn fuse_graph_with_weights(&self, g: &mut Graph, fx: Var, text: Var, mode: Mode) -> Result<(Var, Var)> {
        let xs = g.shape(fx).to_vec();
        let ts = g.shape(text).to_vec();
        if xs.len() != 4 || ts.len() != 3 || ts[0] != xs[0] || ts[1] == 0 {
            return Err(Error::shape("rif_t", format!("features {xs:?}, text {ts:?}")));
        }
        let (b, n, ct) = (ts[0], ts[1], ts[2]);
        let flat = g.reshape(text, &[b * n, ct])?;
        let proj = self.text_proj.forward(g, flat)?;
        let proj = g.reshape(proj, &[b, n, xs[1]])?;
        let pix = owca::to_tokens(g, fx)?;
        let scores = g.bmm(pix, proj, true)?;
        let weights = g.softmax(scores)?;
        let enh = g.bmm(weights, proj, false)?;
        let enh = owca::from_tokens(g, enh, xs[2], xs[3])?;
        let cat = g.concat_channels(&[fx, enh])?;
        Ok((self.fuse.forward(g, cat, mode)?, weights))
    }

    pub fn fuse_graph(&self, g: &mut Graph, fx: Var, text: Var, mode: Mode) -> Result<Var> {
        Ok(self.fuse_graph_with_weights(g, fx, text, mode)?.0)
    }
}

impl Params for RifTLevel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.text_proj.visit(f);
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.text_proj.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// Fusion parameters for levels 2..4.
#[derive(Clone, Debug)]
pub enum FusionParams {
    None,
    Image(Vec<RifSLevel>),
    Text(Vec<RifTLevel>),
}

impl FusionParams {
    pub fn kind(&self) -> FusionKind {
        match self {
            Self::None => FusionKind::None,
            Self::Image(_) => FusionKind::Image,
            Self::Text(_) => FusionKind::Text,
        }
    }
}

impl Params for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Self::None => {}
            Self::Image(l) => l.visit(f),
            Self::Text(l) => l.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Self::None => {}
            Self::Image(l) => l.visit_mut(f),
            Self::Text(l) => l.visit_mut(f),
        }
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.detached().reshape(&s)
}

fn unbatched(g: &Graph, v: Var) -> Result<Tensor> {
    let t = g.value(v);
    t.detached().reshape(&t.shape()[1..])
}

/// Concatenates K same-shaped `[C, H, W]` maps along channels and applies the
/// merge block (running statistics).
pub fn merge_reference_features(refs: &[Tensor], p: &RifSLevel) -> Result<Tensor> {
    let first = refs
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge of zero reference maps".into()))?;
    if refs.len() != p.num_refs() {
        return Err(Error::InvalidArgument(format!(
            "{} reference maps for a block built for {}",
            refs.len(),
            p.num_refs()
        )));
    }
    if refs.iter().any(|r| r.shape() != first.shape()) {
        return Err(Error::shape(
            "merge_reference_features",
            "reference maps differ in shape",
        ));
    }
    let mut g = Graph::new();
    let stacked = g.input(Tensor::stack(refs)?)?;
    let out = p.merge_graph(&mut g, stacked, Mode::Eval)?;
    unbatched(&g, out)
}

/// Image-reference fusion of one `[C, H, W]` level with window side `k`.
pub fn rif_s(fx: &Tensor, fs: &Tensor, k: usize, p: &RifSLevel) -> Result<Tensor> {
    if fx.rank() != 3 || fs.shape() != fx.shape() {
        return Err(Error::shape("rif_s", format!("{:?} vs {:?}", fx.shape(), fs.shape())));
    }
    let grid = WindowGrid::new(fx.dim(1), fx.dim(2), k)?;
    let mut g = Graph::new();
    let x = g.input(batched(fx)?)?;
    let s = g.input(batched(fs)?)?;
    let out = p.fuse_graph(&mut g, x, s, grid, Mode::Eval)?;
    unbatched(&g, out)
}

/// Text-reference fusion of one `[C, H, W]` level with `[N, C_t]` sentences.
pub fn rif_t(fx: &Tensor, ft: &Tensor, p: &RifTLevel) -> Result<Tensor> {
    Ok(rif_t_with_weights(fx, ft, p)?.0)
}

/// As [`rif_t`], also returning the `[H·W, N]` sentence weights.
pub fn rif_t_with_weights(fx: &Tensor, ft: &Tensor, p: &RifTLevel) -> Result<(Tensor, Tensor)> {
    if ft.rank() != 2 || ft.dim(0) == 0 {
        return Err(Error::InvalidArgument("text fusion needs at least one sentence".into()));
    }
    if fx.rank() != 3 {
        return Err(Error::shape("rif_t", format!("features {:?}", fx.shape())));
    }
    let mut g = Graph::new();
    let x = g.input(batched(fx)?)?;
    let t = g.input(batched(ft)?)?;
    let (out, w) = p.fuse_graph_with_weights(&mut g, x, t, Mode::Eval)?;
    Ok((unbatched(&g, out)?, unbatched(&g, w)?))
}

/// Fuses the configured levels of one image's pyramid. Level 1 and levels
/// outside `layers` pass through untouched. `windows` gives the window side
/// for levels 2..4.
pub fn dispatch_fusion(
    pyramid: &FeaturePyramid,
    bundle: &ReferenceBundle,
    params: &FusionParams,
    layers: &[usize],
    windows: [usize; 3],
) -> Result<FeaturePyramid> {
    let mut out = pyramid.clone();
    for &level in layers {
        if !FUSABLE_LEVELS.contains(&level) {
            return Err(Error::Config(format!(
                "level {level} cannot be fused (allowed: 2, 3, 4)"
            )));
        }
        let i = level - 1;
        let fx = &pyramid.levels[i];
        out.levels[i] = match (params, bundle) {
            (FusionParams::Image(ps), ReferenceBundle::Image { pyramids }) => {
                let p = &ps[level - 2];
                let maps: Vec<Tensor> = pyramids.iter().map(|r| r.levels[i].clone()).collect();
                let fs = merge_reference_features(&maps, p)?;
                rif_s(fx, &fs, windows[level - 2], p)?
            }
            (FusionParams::Text(ps), ReferenceBundle::Text { embeddings }) => rif_t(fx, embeddings, &ps[level - 2])?,
            (FusionParams::None, _) => fx.clone(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} fusion parameters given a mismatched reference bundle",
                    params.kind().as_str()
                )))
            }
        };
    }
    Ok(out)
}
