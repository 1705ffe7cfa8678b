//! Evaluation of trained networks and seed-matched ablation sweeps.

use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::{Sample, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Graph, Mode, Var};
use crate::kernels;
use crate::metrics::{self, MetricReport};
use crate::model::train::{self, StepLog};
use crate::model::{checkpoint, References, RfmNet};
use crate::rif::FusionKind;
use crate::tensor::Tensor;

/// The references a network consumes for a sample of `category`: the first
/// `num_refs` reference images of the category, or its sentence embeddings.
pub fn references_for(net: &RfmNet, split: &Split, category: usize) -> Result<References> {
    Ok(match net.cfg.fusion.kind {
        FusionKind::None => References::None,
        FusionKind::Image => {
            let pool = split
                .refs
                .get(category)
                .ok_or_else(|| Error::InvalidArgument(format!("no references for category {category}")))?;
            let k = net.cfg.fusion.num_refs;
            if pool.len() < k {
                return Err(Error::InvalidArgument(format!(
                    "category {category} has {} references, {k} requested",
                    pool.len()
                )));
            }
            References::Images(pool[..k].to_vec())
        }
        FusionKind::Text => References::Text(
            split
                .text
                .get(category)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no text for category {category}")))?,
        ),
    })
}

/// Full-resolution foreground probability `[1, S, S]`: the finest logits
/// upsampled bilinearly, then squashed.
pub fn predict_probability(net: &RfmNet, split: &Split, sample: &Sample) -> Result<Tensor> {
    let refs = references_for(net, split, sample.category)?;
    let pred = net.predict(&sample.image, &refs)?;
    let p1 = &pred.logits[0];
    let (h, w) = (p1.dim(1), p1.dim(2));
    let s = sample.image.dim(1);
    let up = kernels::bilinear_forward(p1.data(), 1, h, w, s, s);
    Tensor::new(vec![1, s, s], up.into_iter().map(kernels::sigmoid).collect())
}

/// Scores every sample of `split` in eval mode.
pub fn evaluate_split(net: &RfmNet, split: &Split) -> Result<MetricReport> {
    let preds = exec::map_slice(&split.samples, |s| predict_probability(net, split, s));
    let mut items = Vec::with_capacity(preds.len());
    for (s, p) in split.samples.iter().zip(preds) {
        items.push((s.name.clone(), p?, s.mask.clone()));
    }
    metrics::evaluate_pairs(&items)
}

/// Loads a checkpoint and scores split `split_name` of the dataset at `root`.
pub fn evaluate_dataset(ckpt: &Path, root: &Path, split_name: &str) -> Result<MetricReport> {
    let net = checkpoint::load(ckpt)?;
    evaluate_split(&net, &Split::load(root, split_name)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Fusion,
    Refs,
    Layers,
    Windows,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Self::Fusion),
            "refs" => Ok(Self::Refs),
            "layers" => Ok(Self::Layers),
            "windows" => Ok(Self::Windows),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected fusion, refs, layers or windows"
            ))),
        }
    }
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub cfg: RunConfig,
}

/// Reference counts of the refs axis; 0 is the no-fusion network.
pub const REF_COUNTS: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Referring-layer subsets of the layers axis.
pub const LAYER_SETS: [&[usize]; 7] = [&[], &[2], &[3], &[4], &[2, 3], &[3, 4], &[2, 3, 4]];
/// Divisors of `H_2, H_3, H_4` giving the window sides of the windows axis.
pub const WINDOW_DIVISORS: [[usize; 3]; 5] = [[1, 1, 1], [2, 2, 2], [4, 4, 4], [4, 2, 1], [1, 2, 4]];

/// Window sides `H_i / d_i`, using a single window where that is below 2.
pub fn windows_from_divisors(sizes: [usize; 3], div: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|i| {
        let k = sizes[i] / div[i];
        if k < 2 {
            sizes[i]
        } else {
            k
        }
    })
}

/// The arms of `axis`, all derived from `base` and sharing its seed.
pub fn arms(base: &RunConfig, axis: AblationAxis) -> Vec<Arm> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm { label, cfg }
    };
    match axis {
        AblationAxis::Fusion => [FusionKind::None, FusionKind::Image, FusionKind::Text]
            .into_iter()
            .map(|k| with(format!("fusion={}", k.as_str()), &|c| c.model.fusion.kind = k))
            .collect(),
        AblationAxis::Refs => REF_COUNTS
            .into_iter()
            .map(|n| {
                with(format!("refs={n}"), &|c| {
                    if n == 0 {
                        c.model.fusion.kind = FusionKind::None;
                    } else {
                        c.model.fusion.kind = FusionKind::Image;
                        c.model.fusion.num_refs = n;
                    }
                })
            })
            .collect(),
        AblationAxis::Layers => LAYER_SETS
            .into_iter()
            .map(|set| {
                let label = if set.is_empty() {
                    "layers=none".to_string()
                } else {
                    format!(
                        "layers={}",
                        set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
                    )
                };
                with(label, &|c| {
                    if c.model.fusion.kind == FusionKind::None {
                        c.model.fusion.kind = FusionKind::Image;
                    }
                    c.model.fusion.layers = set.to_vec();
                })
            })
            .collect(),
        AblationAxis::Windows => {
            let sz = base.model.level_sizes();
            WINDOW_DIVISORS
                .into_iter()
                .map(|d| {
                    let w = windows_from_divisors([sz[1], sz[2], sz[3]], d);
                    with(format!("windows={},{},{}", w[0], w[1], w[2]), &|c| {
                        if c.model.fusion.kind == FusionKind::None {
                            c.model.fusion.kind = FusionKind::Image;
                        }
                        c.model.fusion.windows = Some(w);
                    })
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub label: String,
    pub seed: u64,
    pub net: RfmNet,
    pub log: Vec<StepLog>,
    pub report: MetricReport,
}

/// Trains one arm from its seed and scores it on `test`.
pub fn run_arm(arm: &Arm, train_split: &Split, test: &Split, on_step: impl FnMut(&StepLog)) -> Result<ArmResult> {
    arm.cfg.validate()?;
    let mut net = RfmNet::new(&arm.cfg.model, arm.cfg.seed)?;
    let log = train::train(&mut net, train_split, &arm.cfg.train, arm.cfg.seed, on_step)?;
    let report = evaluate_split(&net, test)?;
    Ok(ArmResult {
        label: arm.label.clone(),
        seed: arm.cfg.seed,
        net,
        log,
        report,
    })
}

/// Aligned comparison table, one row per result.
pub fn comparison_table(results: &[ArmResult]) -> String {
    let mut out = MetricReport::table_header();
    out.push('\n');
    for r in results {
        out.push_str(&r.report.table_row(&format!("{} seed={}", r.label, r.seed)));
        out.push('\n');
    }
    out
}

/// Stages of [`feature_heatmaps`], in output order.
pub const FEATURE_STAGES: [&str; 3] = ["pre_fusion", "post_fusion", "post_rfa"];

/// Channel mean of a `[1, C, H, W]` node, min-max scaled to `[0, 1]`; a
/// constant map becomes all zeros.
fn heatmap(g: &Graph, v: Var) -> Result<Tensor> {
    let t = g.value(v);
    let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
    let mut m = vec![0.0; h * w];
    for ch in t.data().chunks(h * w).take(c) {
        for (a, &x) in m.iter_mut().zip(ch) {
            *a += x / c as f64;
        }
    }
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Tensor::new(
        vec![1, h, w],
        m.into_iter()
            .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
            .collect(),
    )
}

/// Per-level heatmaps `(stage, level, map)` of the encoder output, the fused
/// pyramid and the decoder features, levels numbered from 1.
pub fn feature_heatmaps(net: &RfmNet, image: &Tensor, refs: &References) -> Result<Vec<(&'static str, usize, Tensor)>> {
    let mut g = Graph::new();
    let (x, r) = net.bind_single(&mut g, image, refs)?;
    let out = net.forward_graph(&mut g, x, r, Mode::Eval)?;
    let mut maps = Vec::with_capacity(12);
    for (stage, vars) in FEATURE_STAGES
        .into_iter()
        .zip([out.pre_fusion, out.post_fusion, out.decoded.g])
    {
        for (i, &v) in vars.iter().enumerate() {
            maps.push((stage, i + 1, heatmap(&g, v)?));
        }
    }
    Ok(maps)
}
