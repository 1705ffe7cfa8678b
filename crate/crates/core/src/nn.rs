//! Parameter containers, deterministic initialization, and the layers built
//! from graph primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Mode, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a named tensor is optimized or only tracked (BN running stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Walks every named tensor of a parameter tree in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, k| {
            if k == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    /// Folds train-mode batch statistics into the running estimates with
    /// momentum [`BN_MOMENTUM`].
    fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            let mean_key = format!("{}.bn_running_mean", s.key);
            let var_key = format!("{}.bn_running_var", s.key);
            self.visit_mut(&mut |name, t, _| {
                let src = if name == mean_key {
                    &s.mean
                } else if name == var_key {
                    &s.var
                } else {
                    return;
                };
                for (r, v) in t.data_mut().iter_mut().zip(src) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            });
        }
    }
}

/// Seed of the RNG that initializes tensor `name`: initialization depends only
/// on the model seed and the tensor's name, so models of different shape agree
/// on every tensor they share.
pub fn tensor_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform in `±√(6/fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Fully connected layer; `weight: [in, out]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(name: &str, n_in: usize, n_out: usize, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        Self {
            name: name.to_string(),
            weight: fan_in_uniform(&[n_in, n_out], n_in, seed, &wname),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// `x: [N, in]` to `[N, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", self.name), &self.weight)?;
        let b = g.param(&format!("{}.bias", self.name), &self.bias)?;
        g.linear(x, w, b)
    }
}

impl Params for LinearParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Trainable);
    }
}

/// Plain convolution without normalization or activation.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2dParams {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            kernel: fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, seed, &format!("{name}.kernel")),
            bias: Tensor::zeros(&[c_out]),
            stride: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(&format!("{}.kernel", self.name), &self.kernel)?;
        let b = g.param(&format!("{}.bias", self.name), &self.bias)?;
        let pad = (self.kernel.dim(2) - 1) / 2;
        g.conv2d(x, k, b, self.stride, pad)
    }
}

impl Params for Conv2dParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&format!("{}.kernel", self.name), &self.kernel, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&format!("{}.kernel", self.name), &mut self.kernel, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Trainable);
    }
}

/// Convolution → batch norm → ReLU. Square kernels of side 1 or 3; side 3
/// uses zero padding 1.
#[derive(Clone, Debug)]
pub struct ConvBlockParams {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub stride: usize,
}

impl ConvBlockParams {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, seed: u64) -> Self {
        assert!(k == 1 || k == 3, "conv block kernels are 1x1 or 3x3");
        Self {
            name: name.to_string(),
            kernel: fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, seed, &format!("{name}.kernel")),
            bias: Tensor::zeros(&[c_out]),
            bn_gamma: Tensor::full(&[c_out], 1.0),
            bn_beta: Tensor::zeros(&[c_out]),
            bn_running_mean: Tensor::zeros(&[c_out]),
            bn_running_var: Tensor::full(&[c_out], 1.0),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dim(1)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let n = &self.name;
        let k = g.param(&format!("{n}.kernel"), &self.kernel)?;
        let b = g.param(&format!("{n}.bias"), &self.bias)?;
        let pad = (self.kernel.dim(2) - 1) / 2;
        let y = g.conv2d(x, k, b, self.stride, pad)?;
        let gamma = g.param(&format!("{n}.bn_gamma"), &self.bn_gamma)?;
        let beta = g.param(&format!("{n}.bn_beta"), &self.bn_beta)?;
        let y = g.batch_norm(
            y,
            gamma,
            beta,
            &self.bn_running_mean,
            &self.bn_running_var,
            self.bn_eps,
            mode,
            n,
        )?;
        g.relu(y)
    }
}

impl Params for ConvBlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        let n = &self.name;
        f(&format!("{n}.kernel"), &self.kernel, ParamKind::Trainable);
        f(&format!("{n}.bias"), &self.bias, ParamKind::Trainable);
        f(&format!("{n}.bn_gamma"), &self.bn_gamma, ParamKind::Trainable);
        f(&format!("{n}.bn_beta"), &self.bn_beta, ParamKind::Trainable);
        f(
            &format!("{n}.bn_running_mean"),
            &self.bn_running_mean,
            ParamKind::Buffer,
        );
        f(&format!("{n}.bn_running_var"), &self.bn_running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        let n = self.name.clone();
        f(&format!("{n}.kernel"), &mut self.kernel, ParamKind::Trainable);
        f(&format!("{n}.bias"), &mut self.bias, ParamKind::Trainable);
        f(&format!("{n}.bn_gamma"), &mut self.bn_gamma, ParamKind::Trainable);
        f(&format!("{n}.bn_beta"), &mut self.bn_beta, ParamKind::Trainable);
        f(
            &format!("{n}.bn_running_mean"),
            &mut self.bn_running_mean,
            ParamKind::Buffer,
        );
        f(
            &format!("{n}.bn_running_var"),
            &mut self.bn_running_var,
            ParamKind::Buffer,
        );
    }
}

impl<P: Params> Params for [P] {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

impl<P: Params, const N: usize> Params for [P; N] {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.as_slice().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.as_mut_slice().visit_mut(f)
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.as_slice().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.as_mut_slice().visit_mut(f)
    }
}

impl<P: Params> Params for Option<P> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(p) = self {
            p.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(p) = self {
            p.visit_mut(f)
        }
    }
}

/// Single learnable scalar.
#[derive(Clone, Debug)]
pub struct ScalarParam {
    pub name: String,
    pub value: Tensor,
}

impl ScalarParam {
    pub fn new(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            value: Tensor::scalar(value),
        }
    }

    pub fn get(&self) -> f64 {
        self.value.item()
    }

    pub fn set(&mut self, v: f64) {
        self.value.data_mut()[0] = v;
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Var> {
        g.param(&self.name, &self.value)
    }
}

impl Params for ScalarParam {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&self.name, &self.value, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&self.name, &mut self.value, ParamKind::Trainable);
    }
}

fn unbatched(op: &'static str, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(op, format!("expected [C,H,W], got {:?}", x.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.detached().reshape(&s)
}

/// Applies a conv block to one `[C, H, W]` image. In train mode the single
/// image's statistics normalize it and update the running estimates.
pub fn conv_block(x: &Tensor, p: &mut ConvBlockParams, mode: Mode) -> Result<Tensor> {
    if x.rank() == 3 && x.dim(0) != p.c_in() {
        return Err(Error::shape(
            "conv_block",
            format!("input has {} channels, kernel expects {}", x.dim(0), p.c_in()),
        ));
    }
    let mut g = Graph::new();
    let xv = g.input(unbatched("conv_block", x)?)?;
    let y = p.forward(&mut g, xv, mode)?;
    let stats = g.take_batch_stats();
    p.apply_batch_stats(&stats);
    let out = g.value(y);
    out.detached().reshape(&out.shape()[1..])
}

/// Copies every named tensor of `src` into the same-named tensor of `dst`.
/// Returns how many tensors were copied.
pub fn copy_matching(dst: &mut dyn Params, src: &dyn Params) -> usize {
    let mut map = std::collections::HashMap::new();
    src.visit(&mut |n, t, _| {
        map.insert(n.to_string(), t.detached());
    });
    let mut copied = 0;
    dst.visit_mut(&mut |n, t, _| {
        if let Some(s) = map.get(n) {
            if s.shape() == t.shape() {
                *t = s.clone();
                copied += 1;
            }
        }
    });
    copied
}
