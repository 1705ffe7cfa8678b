//! Boundary-weighted BCE and IoU losses and their fixed-weight sum over the
//! four prediction levels.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::rfa::SegmentationPrediction;
use crate::tensor::Tensor;

/// Side of the box filter that measures how far a pixel is from a boundary.
pub const WEIGHT_WINDOW: usize = 31;
/// Extra weight at a pixel whose whole neighbourhood disagrees with it.
pub const WEIGHT_GAIN: f64 = 5.0;
/// Weights of `L_1..L_4` in the total.
pub const LEVEL_WEIGHTS: [f64; 4] = [7.0, 4.0, 3.0, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeights {
    pub omega: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub per_level: [f64; 4],
    pub total: f64,
}

impl LossTerms {
    pub fn from_levels(per_level: [f64; 4]) -> Self {
        Self {
            per_level,
            total: combine_levels(per_level),
        }
    }
}

/// `7·L_1 + (4·L_2 + 3·L_3 + 2·L_4)`, coarse group summed first.
pub fn combine_levels(l: [f64; 4]) -> f64 {
    let coarse = LEVEL_WEIGHTS[1] * l[1] + LEVEL_WEIGHTS[2] * l[2] + LEVEL_WEIGHTS[3] * l[3];
    LEVEL_WEIGHTS[0] * l[0] + coarse
}

fn ensure_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("ground truth must be binary (0 or 1)".into()))
    }
}

/// `ω = 1 + 5·|avg_pool_same(gt, 31) − gt|` for a `[1, H, W]` mask.
pub fn pixel_weights(gt: &Tensor) -> Result<PixelWeights> {
    let (h, w) = match *gt.shape() {
        [1, h, w] => (h, w),
        ref s => return Err(Error::shape("pixel_weights", format!("expected [1,H,W], got {s:?}"))),
    };
    ensure_binary(gt)?;
    let pooled = kernels::avg_pool_same(gt.data(), h, w, WEIGHT_WINDOW);
    let omega = gt
        .data()
        .iter()
        .zip(&pooled)
        .map(|(g, p)| 1.0 + WEIGHT_GAIN * (p - g).abs())
        .collect();
    Ok(PixelWeights {
        omega: Tensor::new(vec![1, h, w], omega)?,
    })
}

fn check_shapes(op: &'static str, logits: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<()> {
    if logits.shape() != gt.shape() || logits.shape() != omega.shape() {
        return Err(Error::shape(
            op,
            format!(
                "logits {:?}, gt {:?}, omega {:?}",
                logits.shape(),
                gt.shape(),
                omega.shape()
            ),
        ));
    }
    Ok(())
}

/// `Σ ω·bce(σ(logit), gt) / Σ ω` on logits.
pub fn weighted_bce(logits: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<f64> {
    check_shapes("weighted_bce", logits, gt, omega)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&x, &g), &w) in logits.data().iter().zip(gt.data()).zip(omega.data()) {
        num += w * (kernels::softplus(x) - g * x);
        den += w;
    }
    Ok(num / den)
}

/// `1 − Σω·p·g / Σω·(p + g − p·g)` with `p = σ(logit)`; 0 when the union is empty.
pub fn weighted_iou(logits: &Tensor, gt: &Tensor, omega: &Tensor) -> Result<f64> {
    check_shapes("weighted_iou", logits, gt, omega)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&x, &g), &w) in logits.data().iter().zip(gt.data()).zip(omega.data()) {
        let p = kernels::sigmoid(x);
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    Ok(if union == 0.0 { 0.0 } else { 1.0 - inter / union })
}

/// Nearest-neighbour resampling of a `[1, S, S]` mask to `[1, h, w]`, sampling
/// the source pixel under each target pixel's centre.
pub fn downsample_nearest(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (sh, sw) = match *gt.shape() {
        [1, sh, sw] => (sh, sw),
        ref s => {
            return Err(Error::shape(
                "downsample_nearest",
                format!("expected [1,H,W], got {s:?}"),
            ))
        }
    };
    let pick =
        |o: usize, n_out: usize, n_in: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = pick(y, h, sh);
        for x in 0..w {
            out.push(gt.data()[sy * sw + pick(x, w, sw)]);
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Per-level targets and weights for one mask, finest level first.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub gt: Vec<Tensor>,
    pub omega: Vec<Tensor>,
}

impl LossTargets {
    pub fn new(mask: &Tensor, sizes: &[(usize, usize)]) -> Result<Self> {
        let mut gt = Vec::with_capacity(sizes.len());
        let mut omega = Vec::with_capacity(sizes.len());
        for &(h, w) in sizes {
            let g = if mask.shape() == [1, h, w] {
                mask.clone()
            } else {
                downsample_nearest(mask, h, w)?
            };
            omega.push(pixel_weights(&g)?.omega);
            gt.push(g);
        }
        Ok(Self { gt, omega })
    }

    /// Stacks per-sample targets into `[B, 1, H, W]` per level.
    pub fn stack(items: &[LossTargets]) -> Result<Self> {
        let levels = items.first().map_or(0, |t| t.gt.len());
        let mut gt = Vec::with_capacity(levels);
        let mut omega = Vec::with_capacity(levels);
        for l in 0..levels {
            gt.push(Tensor::stack(
                &items.iter().map(|t| t.gt[l].clone()).collect::<Vec<_>>(),
            )?);
            omega.push(Tensor::stack(
                &items.iter().map(|t| t.omega[l].clone()).collect::<Vec<_>>(),
            )?);
        }
        Ok(Self { gt, omega })
    }
}

/// Loss terms of one prediction against its mask pyramid.
pub fn total_loss(pred: &SegmentationPrediction, gt_pyramid: &[Tensor]) -> Result<LossTerms> {
    if pred.logits.len() != 4 || gt_pyramid.len() != 4 {
        return Err(Error::InvalidArgument("total loss needs four levels".into()));
    }
    let mut per_level = [0.0; 4];
    for (i, (logits, gt)) in pred.logits.iter().zip(gt_pyramid).enumerate() {
        let omega = pixel_weights(gt)?.omega;
        per_level[i] = weighted_bce(logits, gt, &omega)? + weighted_iou(logits, gt, &omega)?;
    }
    Ok(LossTerms::from_levels(per_level))
}

/// Differentiable total over batched logits `[B, 1, H_i, W_i]`. Returns the
/// total and the per-level `wbce + wiou` nodes.
pub fn total_loss_graph(g: &mut Graph, logits: [Var; 4], targets: &LossTargets) -> Result<(Var, [Var; 4])> {
    let mut levels = [logits[0]; 4];
    for i in 0..4 {
        let bce = g.weighted_bce(logits[i], &targets.gt[i], &targets.omega[i])?;
        let iou = g.weighted_iou(logits[i], &targets.gt[i], &targets.omega[i])?;
        levels[i] = g.add(bce, iou)?;
    }
    let w: Vec<Var> = (0..4)
        .map(|i| g.scale(levels[i], LEVEL_WEIGHTS[i]))
        .collect::<Result<_>>()?;
    let coarse = g.add(w[1], w[2])?;
    let coarse = g.add(coarse, w[3])?;
    let total = g.add(w[0], coarse)?;
    Ok((total, levels))
}
