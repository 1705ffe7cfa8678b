#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfm_core::Tensor;

/// Uniform entries in `[-1, 1)`, reproducible from `seed`.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform entries in `[lo, hi)`.
pub fn rand_range(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rand_mask(shape: &[usize], p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn batched(x: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.clone().reshape(&s).unwrap()
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}

/// `[C_in, H, W]` zero-padded cross-correlation, written as nested loops.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((o * ci + c) * k + ky) * k + kx]
                                * x.data()[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Eval-mode conv block `relu(γ·(conv − μ)/√(σ²+ε) + β)` on `[C, H, W]`.
pub fn naive_conv_block(x: &Tensor, p: &rfm_core::nn::ConvBlockParams) -> Tensor {
    let pad = (p.kernel.dim(2) - 1) / 2;
    let y = naive_conv(x, &p.kernel, p.bias.data(), p.stride, pad);
    let hw = y.dim(1) * y.dim(2);
    let mut d = y.data().to_vec();
    for (c, plane) in d.chunks_mut(hw).enumerate() {
        let inv = 1.0 / (p.bn_running_var.data()[c] + p.bn_eps).sqrt();
        for v in plane {
            let z = p.bn_gamma.data()[c] * (*v - p.bn_running_mean.data()[c]) * inv + p.bn_beta.data()[c];
            *v = z.max(0.0);
        }
    }
    Tensor::new(y.shape().to_vec(), d).unwrap()
}

/// Row-vector times `[in, out]` weight plus bias.
pub fn naive_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.dim(0), w.dim(1));
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

/// Gives a conv block non-trivial running statistics and affine parameters.
pub fn perturb_block(p: &mut rfm_core::nn::ConvBlockParams, seed: u64) {
    let c = p.c_out();
    p.bias = rand_tensor(&[c], seed);
    p.bn_gamma = rand_range(&[c], 0.5, 1.5, seed + 1);
    p.bn_beta = rand_tensor(&[c], seed + 2);
    p.bn_running_mean = rand_tensor(&[c], seed + 3).map(|v| 0.2 * v);
    p.bn_running_var = rand_range(&[c], 0.5, 2.0, seed + 4);
}

pub mod grad_suite;
pub mod metric_oracles;
