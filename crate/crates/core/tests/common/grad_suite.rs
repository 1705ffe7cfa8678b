//! Central-difference checks of every differentiable op and of the composed
//! modules, each over several random draws. Shared by the gradient tests and
//! the acceptance run.

use super::*;
use rfm_core::config::ModelConfig;
use rfm_core::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
use rfm_core::losses::{self, LossTargets};
use rfm_core::model::{RefVars, RfmNet};
use rfm_core::owca::{self, AttentionConfig, AttentionParams, WindowGrid};
use rfm_core::rfa::RfaParams;
use rfm_core::rif::{FusionKind, RifSLevel, RifTLevel};
use rfm_core::{Graph, Mode, Result, Tensor, Var};

/// One report and the number of coordinates it must have covered.
#[derive(Debug)]
pub struct Check {
    pub report: Result<GradCheckReport>,
    pub min_checked: usize,
}

impl Check {
    fn new(report: Result<GradCheckReport>, min_checked: usize) -> Self {
        Self { report, min_checked }
    }

    pub fn ok(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passes(TOL) && r.checked >= self.min_checked)
    }
}

pub type Case = (&'static str, fn() -> Vec<Check>);

/// Every case, named.
pub const CASES: [Case; 13] = [
    ("matmul_and_bmm", matmul_and_bmm),
    ("linear_and_bias", linear_and_bias),
    ("elementwise", elementwise),
    ("convolution", convolution),
    ("batch_norm", batch_norm_both_modes),
    ("shape_ops", shape_ops),
    ("weighted_losses", weighted_losses),
    ("owca", overlapped_attention_pipeline),
    ("rif_s", rif_s_end_to_end),
    ("rif_t", rif_t_end_to_end),
    ("decode", decode_sum_of_maps),
    ("total_loss_eval", total_loss_through_the_network),
    ("total_loss_train", total_loss_through_the_network_train_mode),
];

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
/// Whole-network losses sum thousands of terms, so the difference quotient is
/// roundoff-bound at the default step; wider steps stay inside the smooth
/// pieces (stencils that cross a ReLU kink are skipped). Batch statistics
/// move every kink in train mode, which needs the narrower of the two.
pub const EVAL_H: f64 = 1e-3;
pub const TRAIN_H: f64 = 1e-4;

/// `Σ r ⊙ y` with a fixed random `r`, so every output entry matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(rand_tensor(g.shape(y), seed ^ 0xabc))?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check(out: &mut Vec<Check>, name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    out.push(Check::new(grad_check(name, inputs, f, GradCheckOptions::default()), 1));
}

fn check_op(
    out: &mut Vec<Check>,
    name: &str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
) {
    for seed in SEEDS {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_tensor(s, seed * 31 + i as u64))
            .collect();
        check(out, name, &inputs, |g, v| {
            let y = f(g, v)?;
            project(g, y, seed)
        });
    }
}

pub fn matmul_and_bmm() -> Vec<Check> {
    let out = &mut Vec::new();
    check_op(out, "matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op(out, "bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    check_op(out, "bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
    std::mem::take(out)
}

pub fn linear_and_bias() -> Vec<Check> {
    let out = &mut Vec::new();
    check_op(out, "linear", &[&[5, 3], &[3, 4], &[4]], |g, v| {
        g.linear(v[0], v[1], v[2])
    });
    check_op(out, "add_bias", &[&[2, 3], &[3]], |g, v| g.add_bias(v[0], v[1]));
    std::mem::take(out)
}

pub fn elementwise() -> Vec<Check> {
    let out = &mut Vec::new();
    check_op(out, "add", &[&[2, 3, 2], &[2, 3, 2]], |g, v| g.add(v[0], v[1]));
    check_op(out, "mul", &[&[2, 3, 2], &[2, 3, 2]], |g, v| g.mul(v[0], v[1]));
    check_op(out, "scale", &[&[7]], |g, v| g.scale(v[0], -1.7));
    check_op(out, "blend", &[&[1], &[2, 3], &[2, 3]], |g, v| {
        g.blend(v[0], v[1], v[2])
    });
    check_op(out, "relu", &[&[4, 5]], |g, v| g.relu(v[0]));
    check_op(out, "sigmoid", &[&[4, 5]], |g, v| g.sigmoid(v[0]));
    check_op(out, "softmax", &[&[3, 6]], |g, v| g.softmax(v[0]));
    std::mem::take(out)
}

pub fn convolution() -> Vec<Check> {
    let out = &mut Vec::new();
    check_op(out, "conv3x3", &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |g, v| {
        g.conv2d(v[0], v[1], v[2], 1, 1)
    });
    check_op(out, "conv3x3_s2", &[&[1, 2, 7, 7], &[3, 2, 3, 3], &[3]], |g, v| {
        g.conv2d(v[0], v[1], v[2], 2, 1)
    });
    check_op(out, "conv1x1", &[&[2, 4, 3, 3], &[2, 4, 1, 1], &[2]], |g, v| {
        g.conv2d(v[0], v[1], v[2], 1, 0)
    });
    std::mem::take(out)
}

pub fn batch_norm_both_modes() -> Vec<Check> {
    let out = &mut Vec::new();
    let mean = rand_tensor(&[3], 1).map(|v| 0.1 * v);
    let var = rand_range(&[3], 0.5, 1.5, 2);
    for mode in [Mode::Train, Mode::Eval] {
        check_op(out, "batch_norm", &[&[2, 3, 3, 3], &[3], &[3]], |g, v| {
            g.batch_norm(v[0], v[1], v[2], &mean, &var, 1e-5, mode, "bn")
        });
    }
    std::mem::take(out)
}

pub fn shape_ops() -> Vec<Check> {
    let out = &mut Vec::new();
    check_op(out, "concat", &[&[2, 1, 3, 3], &[2, 2, 3, 3]], |g, v| {
        g.concat_channels(&[v[0], v[1]])
    });
    check_op(out, "reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check_op(out, "permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op(out, "upsample", &[&[1, 2, 3, 3]], |g, v| {
        g.upsample_bilinear(v[0], 6, 6)
    });
    check_op(out, "channel_gate", &[&[2, 3, 4, 4], &[2, 1, 4, 4]], |g, v| {
        g.channel_gate(v[0], v[1])
    });
    let grid = WindowGrid::new(8, 8, 4).unwrap();
    check_op(out, "partition", &[&[1, 2, 8, 8]], move |g, v| g.partition(v[0], grid));
    check_op(out, "fold", &[&[9, 2, 4, 4]], move |g, v| g.fold(v[0], grid));
    std::mem::take(out)
}

pub fn weighted_losses() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let gt = rand_mask(&[2, 1, 8, 8], 0.4, seed);
        let omega = rand_range(&[2, 1, 8, 8], 1.0, 6.0, seed + 1);
        let logits = rand_range(&[2, 1, 8, 8], -3.0, 3.0, seed + 2);
        check(out, "weighted_bce", std::slice::from_ref(&logits), |g, v| {
            g.weighted_bce(v[0], &gt, &omega)
        });
        check(out, "weighted_iou", &[logits], |g, v| g.weighted_iou(v[0], &gt, &omega));
    }
    std::mem::take(out)
}

pub fn overlapped_attention_pipeline() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let p = AttentionParams::new("a", 4, seed);
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let grid = WindowGrid::new(8, 8, 4).unwrap();
        let x = rand_tensor(&[1, 4, 8, 8], seed + 1);
        let r = rand_tensor(&[1, 4, 4, 4], seed + 2);
        check(out, "owca", &[x, r], |g, v| {
            let y = owca::windowed_cross_attention(g, v[0], v[1], grid, cfg, &p)?;
            project(g, y, seed)
        });
        let opts = GradCheckOptions {
            max_per_tensor: 8,
            seed,
            ..Default::default()
        };
        let x = rand_tensor(&[1, 4, 4, 4], seed + 3);
        let r = rand_tensor(&[1, 4, 4, 4], seed + 4);
        let rep = grad_check_params(
            "owca_params",
            &p,
            &|_| true,
            |p, g| {
                let (xv, rv) = (g.input(x.clone())?, g.input(r.clone())?);
                let y = owca::windowed_cross_attention(g, xv, rv, WindowGrid::new(4, 4, 2)?, cfg, p)?;
                project(g, y, seed)
            },
            opts,
        );
        out.push(Check::new(rep, 1));
    }
    std::mem::take(out)
}

pub fn rif_s_end_to_end() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let mut p = RifSLevel::new(2, 4, 2, 2, seed).unwrap();
        perturb_block(&mut p.merge, seed + 5);
        perturb_block(&mut p.out, seed + 6);
        let fx = rand_tensor(&[1, 4, 8, 8], seed + 1);
        let refs = rand_tensor(&[2, 4, 8, 8], seed + 2);
        let grid = WindowGrid::new(8, 8, 4).unwrap();
        let f = |p: &RifSLevel, g: &mut Graph, x: Var, r: Var| -> Result<Var> {
            let fs = p.merge_graph(g, r, Mode::Eval)?;
            let y = p.fuse_graph(g, x, fs, grid, Mode::Eval)?;
            project(g, y, seed)
        };
        check(out, "rif_s", &[fx.clone(), refs.clone()], |g, v| f(&p, g, v[0], v[1]));
        let opts = GradCheckOptions {
            max_per_tensor: 6,
            seed,
            ..Default::default()
        };
        let rep = grad_check_params(
            "rif_s_params",
            &p,
            &|_| true,
            |p, g| {
                let (x, r) = (g.input(fx.clone())?, g.input(refs.clone())?);
                f(p, g, x, r)
            },
            opts,
        );
        out.push(Check::new(rep, 1));
    }
    std::mem::take(out)
}

pub fn rif_t_end_to_end() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let mut p = RifTLevel::new(3, 4, 6, seed);
        perturb_block(&mut p.fuse, seed + 5);
        let fx = rand_tensor(&[1, 4, 4, 4], seed + 1);
        let text = rand_tensor(&[1, 3, 6], seed + 2);
        let f = |p: &RifTLevel, g: &mut Graph, x: Var, t: Var| -> Result<Var> {
            let y = p.fuse_graph(g, x, t, Mode::Eval)?;
            project(g, y, seed)
        };
        check(out, "rif_t", &[fx.clone(), text.clone()], |g, v| f(&p, g, v[0], v[1]));
        let rep = grad_check_params(
            "rif_t_params",
            &p,
            &|_| true,
            |p, g| {
                let (x, t) = (g.input(fx.clone())?, g.input(text.clone())?);
                f(p, g, x, t)
            },
            GradCheckOptions {
                max_per_tensor: 8,
                seed,
                ..Default::default()
            },
        );
        out.push(Check::new(rep, 1));
    }
    std::mem::take(out)
}

pub fn decode_sum_of_maps() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let p = RfaParams::new([3, 4, 4, 5], 4, seed);
        let levels: Vec<Tensor> = [(3, 16), (4, 8), (4, 4), (5, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| rand_tensor(&[1, c, s, s], seed * 7 + i as u64))
            .collect();
        let rep = grad_check_params(
            "decode",
            &p,
            &|_| true,
            |p, g| {
                let v: Vec<Var> = levels.iter().map(|t| g.input(t.clone())).collect::<Result<_>>()?;
                let out = p.decode_graph(g, [v[0], v[1], v[2], v[3]], Mode::Eval)?;
                let mut acc = g.sum(out.p[0])?;
                for &pi in &out.p[1..] {
                    let s = g.sum(pi)?;
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            },
            GradCheckOptions {
                max_per_tensor: 4,
                seed,
                ..Default::default()
            },
        );
        out.push(Check::new(rep, 101));
    }
    std::mem::take(out)
}

fn tiny_config(kind: FusionKind) -> ModelConfig {
    let mut cfg = ModelConfig {
        input_size: 64,
        stem_channels: 3,
        channels: [4, 4, 4, 4],
        decoder_width: 4,
        text_dim: 5,
        ..ModelConfig::default()
    };
    cfg.fusion.kind = kind;
    cfg.fusion.num_refs = 1;
    cfg.fusion.heads = 2;
    cfg
}

/// Total loss of a batch of two through the whole network.
fn model_loss(net: &RfmNet, g: &mut Graph, seed: u64, mode: Mode) -> Result<Var> {
    let s = net.cfg.input_size;
    let x = g.input(rand_range(&[2, 3, s, s], 0.0, 1.0, seed))?;
    let r = match net.cfg.fusion.kind {
        FusionKind::None => RefVars::None,
        FusionKind::Image => RefVars::Images(g.input(rand_range(&[2, 3, s, s], 0.0, 1.0, seed + 1))?),
        FusionKind::Text => RefVars::Text(g.input(rand_tensor(&[2, 3, net.cfg.text_dim], seed + 1))?),
    };
    let out = net.forward_graph(g, x, r, mode)?;
    let sizes: Vec<(usize, usize)> = net.cfg.level_sizes().iter().map(|&v| (v, v)).collect();
    let targets: Vec<LossTargets> = (0..2)
        .map(|i| LossTargets::new(&rand_mask(&[1, s, s], 0.3, seed + 10 + i), &sizes))
        .collect::<Result<_>>()?;
    let (total, _) = losses::total_loss_graph(g, out.decoded.p, &LossTargets::stack(&targets)?)?;
    Ok(total)
}

pub fn total_loss_through_the_network() -> Vec<Check> {
    let out = &mut Vec::new();
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let kind = [FusionKind::None, FusionKind::Image, FusionKind::Text][i % 3];
        let net = RfmNet::new(&tiny_config(kind), seed).unwrap();
        let opts = GradCheckOptions {
            max_per_tensor: 3,
            seed,
            h: EVAL_H,
            ..Default::default()
        };
        let rep = grad_check_params(
            &format!("model_eval_{}", kind.as_str()),
            &net,
            &|_| true,
            |n, g| model_loss(n, g, seed, Mode::Eval),
            opts,
        );
        out.push(Check::new(rep, 101));
    }
    std::mem::take(out)
}

pub fn total_loss_through_the_network_train_mode() -> Vec<Check> {
    let out = &mut Vec::new();
    for seed in SEEDS {
        let net = RfmNet::new(&tiny_config(FusionKind::Image), seed).unwrap();
        let opts = GradCheckOptions {
            max_per_tensor: 4,
            seed,
            h: TRAIN_H,
            ..Default::default()
        };
        let rep = grad_check_params(
            "model_train",
            &net,
            &|_| true,
            |n, g| model_loss(n, g, seed, Mode::Train),
            opts,
        );
        out.push(Check::new(rep, 51));
    }
    std::mem::take(out)
}
