//! Top-down decoder: each level gates the upsampled coarser features by the
//! coarser prediction before merging them with the level's own features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels;
use crate::model::FeaturePyramid;
use crate::nn::{Conv2dParams, ConvBlockParams, ParamKind, Params};
use crate::tensor::Tensor;

pub const DEFAULT_DECODER_WIDTH: usize = 32;

fn triple(name: &str, c_in: usize, d: usize, seed: u64) -> [ConvBlockParams; 3] {
    [
        ConvBlockParams::new(&format!("{name}.triple0"), c_in, d, 3, seed),
        ConvBlockParams::new(&format!("{name}.triple1"), d, d, 3, seed),
        ConvBlockParams::new(&format!("{name}.triple2"), d, d, 3, seed),
    ]
}

fn run_triple(t: &[ConvBlockParams; 3], g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
    let x = t[0].forward(g, x, mode)?;
    let x = t[1].forward(g, x, mode)?;
    t[2].forward(g, x, mode)
}

/// Prediction head: `C1(Conv3(g))` with a single output channel.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: ConvBlockParams,
    pub c1: Conv2dParams,
}

impl Head {
    fn new(name: &str, d: usize, seed: u64) -> Self {
        Self {
            conv: ConvBlockParams::new(&format!("{name}.head_conv"), d, d, 3, seed),
            c1: Conv2dParams::new(&format!("{name}.c1"), d, 1, 1, seed),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, x, mode)?;
        self.c1.forward(g, h)
    }
}

impl Params for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(f);
        self.c1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(f);
        self.c1.visit_mut(f);
    }
}

/// Coarsest level: `g_4 = Conv3³(f_4)`, `p_4 = C1(Conv3(g_4))`.
#[derive(Clone, Debug)]
pub struct RfaTop {
    pub triple_conv: [ConvBlockParams; 3],
    pub head: Head,
}

impl RfaTop {
    pub fn new(c_in: usize, d: usize, seed: u64) -> Self {
        Self {
            triple_conv: triple("rfa.l4", c_in, d, seed),
            head: Head::new("rfa.l4", d, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph, f4: Var, mode: Mode) -> Result<(Var, Var)> {
        let g4 = run_triple(&self.triple_conv, g, f4, mode)?;
        let p4 = self.head.forward(g, g4, mode)?;
        Ok((g4, p4))
    }
}

impl Params for RfaTop {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.triple_conv.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.triple_conv.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// One finer level of the decoder.
#[derive(Clone, Debug)]
pub struct RfaStep {
    pub level: usize,
    /// `Conv3(f_i)` to width D.
    pub pre_cat_conv: ConvBlockParams,
    /// `j_i = Conv3(σ(BI(p)) ⊙ BI(g))`.
    pub gate_conv: ConvBlockParams,
    /// `k_i = Conv3(Cat(·, j_i))`, `2D → D`.
    pub post_cat_conv: ConvBlockParams,
    pub triple_conv: [ConvBlockParams; 3],
    pub head: Head,
}

impl RfaStep {
    pub fn new(level: usize, c_in: usize, d: usize, seed: u64) -> Self {
        let n = format!("rfa.l{level}");
        Self {
            level,
            pre_cat_conv: ConvBlockParams::new(&format!("{n}.pre_cat"), c_in, d, 3, seed),
            gate_conv: ConvBlockParams::new(&format!("{n}.gate"), d, d, 3, seed),
            post_cat_conv: ConvBlockParams::new(&format!("{n}.post_cat"), 2 * d, d, 3, seed),
            triple_conv: triple(&n, d, d, seed),
            head: Head::new(&n, d, seed),
        }
    }

    /// Returns `(g_i, p_i)` from `f_i` and the coarser `(g_{i+1}, p_{i+1})`.
    pub fn forward(&self, g: &mut Graph, fi: Var, g_next: Var, p_next: Var, mode: Mode) -> Result<(Var, Var)> {
        let (h, w) = (g.shape(fi)[2], g.shape(fi)[3]);
        let (hn, wn) = (g.shape(g_next)[2], g.shape(g_next)[3]);
        if (2 * hn, 2 * wn) != (h, w) || g.shape(p_next)[2..] != [hn, wn] {
            return Err(Error::shape(
                "rfa_step",
                format!("level {} is {h}x{w} but the coarser level is {hn}x{wn}", self.level),
            ));
        }
        let gu = g.upsample_bilinear(g_next, h, w)?;
        let pu = g.upsample_bilinear(p_next, h, w)?;
        let gate = g.sigmoid(pu)?;
        let gated = g.channel_gate(gu, gate)?;
        let j = self.gate_conv.forward(g, gated, mode)?;
        let f = self.pre_cat_conv.forward(g, fi, mode)?;
        let cat = g.concat_channels(&[f, j])?;
        let k = self.post_cat_conv.forward(g, cat, mode)?;
        let gi = run_triple(&self.triple_conv, g, k, mode)?;
        let pi = self.head.forward(g, gi, mode)?;
        Ok((gi, pi))
    }
}

impl Params for RfaStep {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.pre_cat_conv.visit(f);
        self.gate_conv.visit(f);
        self.post_cat_conv.visit(f);
        self.triple_conv.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.pre_cat_conv.visit_mut(f);
        self.gate_conv.visit_mut(f);
        self.post_cat_conv.visit_mut(f);
        self.triple_conv.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Decoder for a 4-level pyramid with channels `channels[0..4]`.
#[derive(Clone, Debug)]
pub struct RfaParams {
    pub width: usize,
    pub top: RfaTop,
    /// Levels 3, 2, 1 in decoding order.
    pub steps: Vec<RfaStep>,
}

/// Decoder outputs per level, finest first.
pub struct DecodeVars {
    pub g: [Var; 4],
    pub p: [Var; 4],
}

impl RfaParams {
    pub fn new(channels: [usize; 4], width: usize, seed: u64) -> Self {
        Self {
            width,
            top: RfaTop::new(channels[3], width, seed),
            steps: (1..=3)
                .rev()
                .map(|l| RfaStep::new(l, channels[l - 1], width, seed))
                .collect(),
        }
    }

    pub fn decode_graph(&self, g: &mut Graph, levels: [Var; 4], mode: Mode) -> Result<DecodeVars> {
        let (g4, p4) = self.top.forward(g, levels[3], mode)?;
        let (mut gs, mut ps) = ([g4; 4], [p4; 4]);
        let (mut gn, mut pn) = (g4, p4);
        for step in &self.steps {
            let i = step.level - 1;
            let (gi, pi) = step.forward(g, levels[i], gn, pn, mode)?;
            gs[i] = gi;
            ps[i] = pi;
            (gn, pn) = (gi, pi);
        }
        Ok(DecodeVars { g: gs, p: ps })
    }
}

impl Params for RfaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.top.visit(f);
        self.steps.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.top.visit_mut(f);
        self.steps.visit_mut(f);
    }
}

/// Four logit maps `[1, H_i, W_i]`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationPrediction {
    pub logits: Vec<Tensor>,
}

impl SegmentationPrediction {
    pub fn probabilities(&self, level: usize) -> Tensor {
        self.logits[level].map(kernels::sigmoid)
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

/// `(g_4, p_4)` for one `[C_4, H_4, W_4]` map (running statistics).
pub fn rfa_top(f4: &Tensor, p: &RfaTop) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(batched(f4)?)?;
    let (gv, pv) = p.forward(&mut g, x, Mode::Eval)?;
    Ok((unbatched(&g, gv)?, unbatched(&g, pv)?))
}

/// `(g_i, p_i)` for one image (running statistics).
pub fn rfa_step(fi: &Tensor, g_next: &Tensor, p_next: &Tensor, p: &RfaStep) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let f = g.input(batched(fi)?)?;
    let gn = g.input(batched(g_next)?)?;
    let pn = g.input(batched(p_next)?)?;
    let (gv, pv) = p.forward(&mut g, f, gn, pn, Mode::Eval)?;
    Ok((unbatched(&g, gv)?, unbatched(&g, pv)?))
}

pub fn decode(pyramid: &FeaturePyramid, p: &RfaParams) -> Result<SegmentationPrediction> {
    if pyramid.levels.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "decoder needs 4 levels, got {}",
            pyramid.levels.len()
        )));
    }
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(4);
    for l in &pyramid.levels {
        vars.push(g.input(batched(l)?)?);
    }
    let out = p.decode_graph(&mut g, [vars[0], vars[1], vars[2], vars[3]], Mode::Eval)?;
    Ok(SegmentationPrediction {
        logits: out.p.iter().map(|&v| unbatched(&g, v)).collect::<Result<_>>()?,
    })
}
