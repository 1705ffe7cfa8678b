//! Two-branch encoder, fusion dispatch, and decoder assembled into one
//! network.

pub mod checkpoint;
pub mod train;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{ConvBlockParams, ParamKind, Params};
use crate::owca::WindowGrid;
use crate::rfa::{DecodeVars, RfaParams, SegmentationPrediction};
use crate::rif::{self, FusionKind, FusionParams, ReferenceBundle, RifSLevel, RifTLevel};
use crate::tensor::Tensor;

/// Four feature maps `[C_i, H_i, W_i]` at strides 4, 8, 16, 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Stride-2 stem followed by four stages, each a stride-2 Conv3 block and a
/// Conv3 block.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBlockParams,
    pub stages: Vec<[ConvBlockParams; 2]>,
}

impl Encoder {
    pub fn new(name: &str, stem_channels: usize, channels: [usize; 4], seed: u64) -> Self {
        let stem = ConvBlockParams::new(&format!("{name}.stem"), 3, stem_channels, 3, seed).with_stride(2);
        let mut prev = stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            stages.push([
                ConvBlockParams::new(&format!("{name}.s{}.down", i + 1), prev, c, 3, seed).with_stride(2),
                ConvBlockParams::new(&format!("{name}.s{}.conv", i + 1), c, c, 3, seed),
            ]);
            prev = c;
        }
        Self { stem, stages }
    }

    /// `[B, 3, S, S]` to the four levels `[B, C_i, S/2^(i+1), …]`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<[Var; 4]> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || !s[2].is_multiple_of(32) || s[2] == 0 {
            return Err(Error::shape(
                "encode",
                format!("expected [B,3,S,S] with S a multiple of 32, got {s:?}"),
            ));
        }
        let mut h = self.stem.forward(g, x, mode)?;
        let mut out = [h; 4];
        for (i, [down, conv]) in self.stages.iter().enumerate() {
            h = down.forward(g, h, mode)?;
            h = conv.forward(g, h, mode)?;
            out[i] = h;
        }
        Ok(out)
    }
}

impl Params for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.stem.visit(f);
        self.stages.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.stem.visit_mut(f);
        self.stages.visit_mut(f);
    }
}

fn with_batch_axis(x: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.detached().reshape(&s)
}

fn without_batch_axis(g: &Graph, v: Var) -> Result<Tensor> {
    let t = g.value(v);
    t.detached().reshape(&t.shape()[1..])
}

/// Encodes one `[3, S, S]` image with running statistics.
pub fn encode(image: &Tensor, enc: &Encoder) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let x = g.input(with_batch_axis(image)?)?;
    let levels = enc.forward_graph(&mut g, x, Mode::Eval)?;
    Ok(FeaturePyramid {
        levels: levels
            .iter()
            .map(|&v| without_batch_axis(&g, v))
            .collect::<Result<_>>()?,
    })
}

/// Reference inputs of a batch as graph nodes.
#[derive(Clone, Copy, Debug)]
pub enum RefVars {
    None,
    /// `[B·K, 3, S, S]`, the K references of each sample contiguous.
    Images(Var),
    /// `[B, N, C_t]`
    Text(Var),
}

/// Reference inputs of one image.
#[derive(Clone, Debug)]
pub enum References {
    None,
    /// K images `[3, S, S]`.
    Images(Vec<Tensor>),
    /// `[N, C_t]`
    Text(Tensor),
}

/// Intermediate nodes of one forward pass.
pub struct ForwardVars {
    pub pre_fusion: [Var; 4],
    pub post_fusion: [Var; 4],
    pub decoded: DecodeVars,
}

#[derive(Clone, Debug)]
pub struct RfmNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub ref_encoder: Option<Encoder>,
    pub fusion: FusionParams,
    pub decoder: RfaParams,
}

impl RfmNet {
    /// Builds a network whose tensors are initialized from `seed` and their
    /// names, so networks of different fusion kinds share every common tensor.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let (ref_encoder, fusion) = match cfg.fusion.kind {
            FusionKind::None => (None, FusionParams::None),
            FusionKind::Image => (
                Some(Encoder::new("enc_ref", cfg.stem_channels, c, seed)),
                FusionParams::Image(
                    rif::FUSABLE_LEVELS
                        .iter()
                        .map(|&l| RifSLevel::new(l, c[l - 1], cfg.fusion.num_refs, cfg.fusion.heads, seed))
                        .collect::<Result<_>>()?,
                ),
            ),
            FusionKind::Text => (
                None,
                FusionParams::Text(
                    rif::FUSABLE_LEVELS
                        .iter()
                        .map(|&l| RifTLevel::new(l, c[l - 1], cfg.text_dim, seed))
                        .collect(),
                ),
            ),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new("enc_x", cfg.stem_channels, c, seed),
            ref_encoder,
            fusion,
            decoder: RfaParams::new(c, cfg.decoder_width, seed),
        })
    }

    fn grid(&self, level: usize, size: usize) -> Result<WindowGrid> {
        WindowGrid::new(size, size, self.cfg.windows()[level - 2])
    }

    pub fn forward_graph(&self, g: &mut Graph, images: Var, refs: RefVars, mode: Mode) -> Result<ForwardVars> {
        let pre = self.encoder.forward_graph(g, images, mode)?;
        let mut post = pre;
        let layers = &self.cfg.fusion.layers;
        match (&self.fusion, refs) {
            (FusionParams::None, _) => {}
            (FusionParams::Image(levels), RefVars::Images(r)) => {
                if !layers.is_empty() {
                    let enc = self.ref_encoder.as_ref().expect("image fusion has a reference encoder");
                    let rp = enc.forward_graph(g, r, mode)?;
                    for p in levels.iter().filter(|p| layers.contains(&p.level)) {
                        let i = p.level - 1;
                        let fs = p.merge_graph(g, rp[i], mode)?;
                        let grid = self.grid(p.level, g.shape(pre[i])[2])?;
                        post[i] = p.fuse_graph(g, pre[i], fs, grid, mode)?;
                    }
                }
            }
            (FusionParams::Text(levels), RefVars::Text(t)) => {
                for p in levels.iter().filter(|p| layers.contains(&p.level)) {
                    let i = p.level - 1;
                    post[i] = p.fuse_graph(g, pre[i], t, mode)?;
                }
            }
            (f, _) => {
                return Err(Error::InvalidArgument(format!(
                    "{} fusion network given mismatched references",
                    f.kind().as_str()
                )))
            }
        }
        let decoded = self.decoder.decode_graph(g, post, mode)?;
        Ok(ForwardVars {
            pre_fusion: pre,
            post_fusion: post,
            decoded,
        })
    }

    /// Binds one image and its references as a batch of one.
    pub fn bind_single(&self, g: &mut Graph, image: &Tensor, refs: &References) -> Result<(Var, RefVars)> {
        let x = g.input(with_batch_axis(image)?)?;
        let r = match refs {
            References::None => RefVars::None,
            References::Images(list) => RefVars::Images(g.input(Tensor::stack(list)?)?),
            References::Text(t) => RefVars::Text(g.input(with_batch_axis(t)?)?),
        };
        Ok((x, r))
    }

    /// Eval-mode prediction for one `[3, S, S]` image.
    pub fn predict(&self, image: &Tensor, refs: &References) -> Result<SegmentationPrediction> {
        let mut g = Graph::new();
        let (x, r) = self.bind_single(&mut g, image, refs)?;
        let out = self.forward_graph(&mut g, x, r, Mode::Eval)?;
        Ok(SegmentationPrediction {
            logits: out
                .decoded
                .p
                .iter()
                .map(|&v| without_batch_axis(&g, v))
                .collect::<Result<_>>()?,
        })
    }

    /// Encodes raw references into the bundle consumed by [`RfmNet::forward`].
    pub fn reference_bundle(&self, refs: &References) -> Result<Option<ReferenceBundle>> {
        Ok(match refs {
            References::None => None,
            References::Images(list) => {
                let enc = self
                    .ref_encoder
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("network has no reference encoder".into()))?;
                Some(ReferenceBundle::Image {
                    pyramids: list.iter().map(|r| encode(r, enc)).collect::<Result<_>>()?,
                })
            }
            References::Text(t) => Some(ReferenceBundle::Text { embeddings: t.clone() }),
        })
    }

    /// Eval-mode forward through the per-image module functions: encode,
    /// dispatch fusion, decode.
    pub fn forward(&self, camo: &Tensor, bundle: Option<&ReferenceBundle>) -> Result<SegmentationPrediction> {
        let pyramid = encode(camo, &self.encoder)?;
        let fused = match bundle {
            Some(b) => rif::dispatch_fusion(&pyramid, b, &self.fusion, &self.cfg.fusion.layers, self.cfg.windows())?,
            None => pyramid,
        };
        crate::rfa::decode(&fused, &self.decoder)
    }
}

impl Params for RfmNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.encoder.visit(f);
        self.ref_encoder.visit(f);
        self.fusion.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.encoder.visit_mut(f);
        self.ref_encoder.visit_mut(f);
        self.fusion.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
