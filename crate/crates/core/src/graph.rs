//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each method evaluates
//! its op eagerly, records the inputs it needs for the backward pass, and
//! returns a [`Var`] handle. [`Graph::backward`] then walks the list in
//! reverse, accumulating gradients for every node that reaches the output.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::owca::WindowGrid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch norm, keyed by the owning
/// block's name. The caller folds them into the running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub key: String,
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel exists).
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(String),
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Blend {
        alpha: Var,
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    ChannelGate {
        g: Var,
        p: Var,
    },
    Partition {
        x: Var,
        grid: WindowGrid,
        batch: usize,
    },
    Fold {
        x: Var,
        grid: WindowGrid,
        batch: usize,
    },
    WeightedBce {
        logits: Var,
        target: Vec<f64>,
        omega: Vec<f64>,
        batch: usize,
    },
    WeightedIou {
        logits: Var,
        target: Vec<f64>,
        omega: Vec<f64>,
        batch: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    batch_stats: Vec<BatchStats>,
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [B,C,H,W], got {s:?}"))),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of the sign pattern of every ReLU input. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.value(x).data() {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.batch_stats)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op_name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no parameter name. Gradients are still available
    /// through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t.detached(), Op::Leaf)
    }

    /// Named trainable leaf; gradients are collected per name.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        self.push("param", t.detached(), Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            false,
            false,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b })
    }

    /// Batched product over the leading axis. With `tb`, `b` is stored as
    /// `[G, N, K]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (&sa[..], &sb[..], tb) {
            ([g, m, k], [g2, k2, n], false) if g == g2 && k == k2 => (*g, *m, *k, *n),
            ([g, m, k], [g2, n, k2], true) if g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (tb={tb})"))),
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        crate::exec::for_each_chunk_mut(&mut out, m * n, |i, o| {
            kernels::gemm(
                false,
                tb,
                m,
                n,
                k,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                o,
            );
        });
        self.push("bmm", Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, tb })
    }

    /// Adds `bias[C]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("add_bias", t, Op::AddBias { x, bias })
    }

    /// `x · w + b` for `x: [N, C_in]`, `w: [C_in, C_out]`, `b: [C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale { x, c })
    }

    /// `alpha · a + (1 − alpha) · b` with a learnable scalar `alpha`.
    pub fn blend(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("blend", a, b)?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::shape("blend", "alpha must be a scalar"));
        }
        let al = self.value(alpha).item();
        let t = self.zip_map(a, b, |x, y| al * x + (1.0 - al) * y)?;
        self.push("blend", t, Op::Blend { alpha, a, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", t, Op::Sigmoid { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.ensure_finite("softmax")?;
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let out = kernels::softmax_rows(t.data(), n);
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [batch, c_in, h, wd] = rank4("conv2d", self.value(x))?;
        let (c_out, kh, kw) = match *self.shape(w) {
            [co, ci, kh, kw] if ci == c_in => (co, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} against input channels {c_in}"),
                ))
            }
        };
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv2d", "bias length differs from output channels"));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![batch, c_out, geom.out_h(), geom.out_w()], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, batch })
    }

    /// Per-channel batch normalization of `[B, C, H, W]`.
    ///
    /// In [`Mode::Train`] the batch statistics normalize the input and are
    /// recorded under `stats_key`; in [`Mode::Eval`] the running estimates are
    /// used and only `x`, `gamma`, `beta` receive gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
        mode: Mode,
        stats_key: &str,
    ) -> Result<Var> {
        let [batch, c, h, w] = rank4("batch_norm", self.value(x))?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(t) != [c] {
                return Err(Error::shape("batch_norm", format!("{name} must have {c} entries")));
            }
        }
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let hw = h * w;
        let n = batch * hw;
        let xd = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut v = 0.0;
                    for b in 0..batch {
                        for &xv in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / n as f64;
                }
                (mean, var)
            }
            Mode::Eval => {
                if running_var.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "batch norm running variance must be strictly positive".into(),
                    ));
                }
                (running_mean.data().to_vec(), running_var.data().to_vec())
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let t = Tensor::new(vec![batch, c, h, w], out)?;
        let op = match mode {
            Mode::Train => {
                let unbiased = if n > 1 {
                    var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
                } else {
                    var.clone()
                };
                self.batch_stats.push(BatchStats {
                    key: stats_key.to_string(),
                    mean,
                    var: unbiased,
                });
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    invstd,
                }
            }
            Mode::Eval => Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
        };
        self.push("batch_norm", t, op)
    }

    /// Concatenation of `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [batch, _, h, w] = rank4("concat", self.value(first))?;
        let mut total_c = 0;
        for &p in parts {
            let [b2, c, h2, w2] = rank4("concat", self.value(p))?;
            if (b2, h2, w2) != (batch, h, w) {
                return Err(Error::shape("concat", format!("{:?}", self.shape(p))));
            }
            total_c += c;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(batch * total_c * hw);
        for b in 0..batch {
            for &p in parts {
                let t = self.value(p);
                let c = t.dim(1);
                out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let t = Tensor::new(vec![batch, total_c, h, w], out)?;
        self.push("concat", t, Op::Concat { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).detached().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        self.push("permute", t, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Half-pixel bilinear resampling of `[B, C, h, w]` to `[B, C, out_h, out_w]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = rank4("upsample", self.value(x))?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("bilinear upsample of an empty plane".into()));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), b * c, h, w, out_h, out_w);
        let t = Tensor::new(vec![b, c, out_h, out_w], out)?;
        self.push("upsample", t, Op::Upsample { x })
    }

    /// Multiplies every channel of `g: [B, C, H, W]` by the single-channel map
    /// `p: [B, 1, H, W]`.
    pub fn channel_gate(&mut self, g: Var, p: Var) -> Result<Var> {
        let [b, c, h, w] = rank4("channel_gate", self.value(g))?;
        if self.shape(p) != [b, 1, h, w] {
            return Err(Error::shape("channel_gate", format!("gate {:?}", self.shape(p))));
        }
        let hw = h * w;
        let (gd, pd) = (self.value(g).data(), self.value(p).data());
        let mut out = vec![0.0; gd.len()];
        for bi in 0..b {
            let gate = &pd[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = gd[base + i] * gate[i];
                }
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        self.push("channel_gate", t, Op::ChannelGate { g, p })
    }

    /// Splits `[B, C, H, W]` into `[B·m², C, k, k]` windows, row-major per image.
    pub fn partition(&mut self, x: Var, grid: WindowGrid) -> Result<Var> {
        let [b, c, h, w] = rank4("partition", self.value(x))?;
        if (h, w) != (grid.h, grid.w) {
            return Err(Error::shape(
                "partition",
                format!("grid built for {}x{}, input {h}x{w}", grid.h, grid.w),
            ));
        }
        let out = crate::owca::partition_slice(self.value(x).data(), b, c, &grid);
        let t = Tensor::new(vec![b * grid.count(), c, grid.k, grid.k], out)?;
        self.push("partition", t, Op::Partition { x, grid, batch: b })
    }

    /// Inverse of [`Graph::partition`]: overlapping pixels are averaged.
    pub fn fold(&mut self, x: Var, grid: WindowGrid) -> Result<Var> {
        let [n, c, kh, kw] = rank4("fold", self.value(x))?;
        if kh != grid.k || kw != grid.k || n % grid.count() != 0 {
            return Err(Error::shape(
                "fold",
                format!("{:?} against {}x{} grid of k={}", self.shape(x), grid.m, grid.m, grid.k),
            ));
        }
        let batch = n / grid.count();
        let out = crate::owca::fold_slice(self.value(x).data(), batch, c, &grid);
        let t = Tensor::new(vec![batch, c, grid.h, grid.w], out)?;
        self.push("fold", t, Op::Fold { x, grid, batch })
    }

    fn loss_inputs(&self, op: &'static str, logits: Var, target: &Tensor, omega: &Tensor) -> Result<usize> {
        let s = self.shape(logits);
        if s.len() != 4 || s[1] != 1 || target.shape() != s || omega.shape() != s {
            return Err(Error::shape(
                op,
                format!("logits {s:?}, target {:?}, omega {:?}", target.shape(), omega.shape()),
            ));
        }
        Ok(s[0])
    }

    /// Batch mean of the per-image pixel-weighted binary cross entropy on logits.
    pub fn weighted_bce(&mut self, logits: Var, target: &Tensor, omega: &Tensor) -> Result<Var> {
        let batch = self.loss_inputs("weighted_bce", logits, target, omega)?;
        let x = self.value(logits).data();
        let per = x.len() / batch;
        let mut total = 0.0;
        for b in 0..batch {
            let r = b * per..(b + 1) * per;
            let (mut num, mut den) = (0.0, 0.0);
            for ((&xv, &g), &w) in x[r.clone()].iter().zip(&target.data()[r.clone()]).zip(&omega.data()[r]) {
                num += w * (kernels::softplus(xv) - g * xv);
                den += w;
            }
            total += num / den;
        }
        let op = Op::WeightedBce {
            logits,
            target: target.data().to_vec(),
            omega: omega.data().to_vec(),
            batch,
        };
        self.push("weighted_bce", Tensor::scalar(total / batch as f64), op)
    }

    /// Batch mean of `1 − Σω·p·g / Σω·(p + g − p·g)` with `p = σ(logits)`.
    pub fn weighted_iou(&mut self, logits: Var, target: &Tensor, omega: &Tensor) -> Result<Var> {
        let batch = self.loss_inputs("weighted_iou", logits, target, omega)?;
        let x = self.value(logits).data();
        let per = x.len() / batch;
        let mut total = 0.0;
        for b in 0..batch {
            let (inter, union) = iou_sums(
                &x[b * per..(b + 1) * per],
                &target.data()[b * per..(b + 1) * per],
                &omega.data()[b * per..(b + 1) * per],
            );
            total += if union == 0.0 { 0.0 } else { 1.0 - inter / union };
        }
        let op = Op::WeightedIou {
            logits,
            target: target.data().to_vec(),
            omega: omega.data().to_vec(),
            batch,
        };
        self.push("weighted_iou", Tensor::scalar(total / batch as f64), op)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        }
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                kernels::gemm(false, true, m, k, n, g, val(*b), &mut da);
                let mut db = vec![0.0; k * n];
                kernels::gemm(true, false, k, n, m, val(*a), g, &mut db);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Bmm { a, b, tb } => {
                let sa = self.shape(*a);
                let (gc, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.dim(2);
                let (ad, bd) = (val(*a), val(*b));
                let mut da = vec![0.0; gc * m * k];
                let mut db = vec![0.0; gc * k * n];
                for gi in 0..gc {
                    let gs = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &ad[gi * m * k..(gi + 1) * m * k];
                    let bg = &bd[gi * k * n..(gi + 1) * k * n];
                    let da_g = &mut da[gi * m * k..(gi + 1) * m * k];
                    let db_g = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *tb {
                        // C = A·Bᵀ with B stored [N, K]
                        kernels::gemm(false, false, m, k, n, gs, bg, da_g);
                        kernels::gemm(true, false, n, k, m, gs, ag, db_g);
                    } else {
                        kernels::gemm(false, true, m, k, n, gs, bg, da_g);
                        kernels::gemm(true, false, k, n, m, ag, gs, db_g);
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                acc(grads, *x, g.to_vec());
                acc(grads, *bias, db);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                acc(grads, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                acc(grads, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            Op::Scale { x, c } => acc(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Blend { alpha, a, b } => {
                let al = self.value(*alpha).item();
                let (ad, bd) = (val(*a), val(*b));
                let dal: f64 = g.iter().zip(ad.iter().zip(bd)).map(|(g, (a, b))| g * (a - b)).sum();
                acc(grads, *alpha, vec![dal]);
                acc(grads, *a, g.iter().map(|v| v * al).collect());
                acc(grads, *b, g.iter().map(|v| v * (1.0 - al)).collect());
            }
            Op::Relu { x } => {
                let xd = val(*x);
                acc(
                    grads,
                    *x,
                    g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                acc(grads, *x, vec![g[0]; n]);
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), *batch, val(*w), g, geom);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let [batch, c, h, w] = rank4("batch_norm", self.value(*x))?;
                let hw = h * w;
                let n = (batch * hw) as f64;
                let gd = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let k = gd[ch] * invstd[ch] / n;
                        for i in base..base + hw {
                            dx[i] = k * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let [batch, c, h, w] = rank4("batch_norm", self.value(*x))?;
                let hw = h * w;
                let gd = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                            dx[i] = g[i] * gd[ch] * invstd[ch];
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Concat { parts } => {
                let [batch, total_c, h, w] = rank4("concat", &node.value)?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dim(1);
                    let mut dp = Vec::with_capacity(batch * c * hw);
                    for bi in 0..batch {
                        let start = (bi * total_c + offset) * hw;
                        dp.extend_from_slice(&g[start..start + c * hw]);
                    }
                    acc(grads, p, dp);
                    offset += c;
                }
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = permute_data(g, node.value.shape(), &inv);
                acc(grads, *x, dx);
            }
            Op::Upsample { x } => {
                let [b, c, h, w] = rank4("upsample", self.value(*x))?;
                let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                acc(grads, *x, kernels::bilinear_backward(g, b * c, h, w, oh, ow));
            }
            Op::ChannelGate { g: gv, p } => {
                let [b, c, h, w] = rank4("channel_gate", &node.value)?;
                let hw = h * w;
                let (gd, pd) = (val(*gv), val(*p));
                let mut dg = vec![0.0; gd.len()];
                let mut dp = vec![0.0; pd.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in 0..hw {
                            dg[base + i] = g[base + i] * pd[bi * hw + i];
                            dp[bi * hw + i] += g[base + i] * gd[base + i];
                        }
                    }
                }
                acc(grads, *gv, dg);
                acc(grads, *p, dp);
            }
            Op::Partition { x, grid, batch } => {
                let c = self.value(*x).dim(1);
                acc(grads, *x, crate::owca::partition_adjoint(g, *batch, c, grid));
            }
            Op::Fold { x, grid, batch } => {
                let c = node.value.dim(1);
                acc(grads, *x, crate::owca::fold_adjoint(g, *batch, c, grid));
            }
            Op::WeightedBce {
                logits,
                target,
                omega,
                batch,
            } => {
                let x = val(*logits);
                let per = x.len() / batch;
                let mut dx = vec![0.0; x.len()];
                for b in 0..*batch {
                    let r = b * per..(b + 1) * per;
                    let den: f64 = omega[r.clone()].iter().sum();
                    for i in r {
                        dx[i] = g[0] * omega[i] * (kernels::sigmoid(x[i]) - target[i]) / den / *batch as f64;
                    }
                }
                acc(grads, *logits, dx);
            }
            Op::WeightedIou {
                logits,
                target,
                omega,
                batch,
            } => {
                let x = val(*logits);
                let per = x.len() / batch;
                let mut dx = vec![0.0; x.len()];
                for b in 0..*batch {
                    let r = b * per..(b + 1) * per;
                    let (inter, union) = iou_sums(&x[r.clone()], &target[r.clone()], &omega[r.clone()]);
                    if union == 0.0 {
                        continue;
                    }
                    for i in r {
                        let p = kernels::sigmoid(x[i]);
                        let dp = p * kernels::sigmoid(-x[i]);
                        let (w, t) = (omega[i], target[i]);
                        let d_ratio = (w * t * union - inter * w * (1.0 - t)) / (union * union);
                        dx[i] = -g[0] * d_ratio * dp / *batch as f64;
                    }
                }
                acc(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn iou_sums(x: &[f64], target: &[f64], omega: &[f64]) -> (f64, f64) {
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&xv, &t), &w) in x.iter().zip(target).zip(omega) {
        let p = kernels::sigmoid(xv);
        inter += w * p * t;
        union += w * (p + t - p * t);
    }
    (inter, union)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to any node, zero-filled if the node did not
    /// influence the output.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every named parameter leaf, summed over repeated uses.
    pub fn by_name(&self, graph: &Graph) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = self.wrt(graph, Var(i));
                match out.get_mut(name) {
                    Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}
