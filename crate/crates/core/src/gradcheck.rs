//! Central-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ParamKind, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Flat index into the concatenation of all checked tensors.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose difference stencil crossed a ReLU kink. The function
    /// is not differentiable across the stencil there, so they are excluded.
    pub skipped_kinks: usize,
    /// Coordinates whose gradient is below what a central difference can
    /// resolve to `resolution` relative accuracy in double precision, about
    /// `ε·|f| / (h·resolution)`. Exactly-zero gradients land here.
    pub skipped_unresolvable: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.checked > 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Upper bound on checked coordinates per tensor; larger tensors are
    /// subsampled deterministically.
    pub max_per_tensor: usize,
    pub seed: u64,
    /// Relative accuracy the comparison must be able to resolve.
    pub resolution: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_per_tensor: usize::MAX,
            seed: 0,
            resolution: 1e-4,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss at the given tensors and a fingerprint of its ReLU activation pattern.
type Probe<'a> = &'a dyn Fn(&[Tensor]) -> Result<(f64, u64)>;

fn check_core(
    op_name: &str,
    mut tensors: Vec<Tensor>,
    analytic: &[Tensor],
    eval: Probe<'_>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (base, base_pattern) = eval(&tensors)?;
    let floor = f64::EPSILON * base.abs().max(1.0) / (opts.h * opts.resolution);
    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped_kinks: 0,
        skipped_unresolvable: 0,
    };
    let mut offset = 0;
    for ti in 0..tensors.len() {
        let n = tensors[ti].numel();
        let coords: Vec<usize> = if n <= opts.max_per_tensor {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (ti as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut v = rand::seq::index::sample(&mut rng, n, opts.max_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = tensors[ti].data()[i];
            tensors[ti].data_mut()[i] = orig + opts.h;
            let (fp, pp) = eval(&tensors)?;
            tensors[ti].data_mut()[i] = orig - opts.h;
            let (fm, pm) = eval(&tensors)?;
            tensors[ti].data_mut()[i] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            if analytic[ti].data()[i].abs().max(numeric.abs()) < floor {
                report.skipped_unresolvable += 1;
                continue;
            }
            let err = rel_error(analytic[ti].data()[i], numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = offset + i;
            }
        }
        offset += n;
    }
    Ok(report)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Checks the gradient of `f` with respect to each of `inputs`.
pub fn grad_check<F>(op_name: &str, inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let build = |ts: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.detached())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = build(inputs)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    let eval = |ts: &[Tensor]| -> Result<(f64, u64)> {
        let (g, _, out) = build(ts)?;
        Ok((scalar_output(&g, out)?, g.relu_pattern()))
    };
    check_core(op_name, inputs.to_vec(), &analytic, &eval, opts)
}

/// Checks the gradient of `f` with respect to every trainable tensor of
/// `model` whose name satisfies `select`.
pub fn grad_check_params<P, F>(
    op_name: &str,
    model: &P,
    select: &dyn Fn(&str) -> bool,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    P: Params + Clone,
    F: Fn(&P, &mut Graph) -> Result<Var>,
{
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    model.visit(&mut |n, t, k| {
        if k == ParamKind::Trainable && select(n) {
            names.push(n.to_string());
            tensors.push(t.detached());
        }
    });
    let mut g = Graph::new();
    let out = f(model, &mut g)?;
    scalar_output(&g, out)?;
    let by_name = g.backward(out)?.by_name(&g);
    let analytic: Vec<Tensor> = names
        .iter()
        .zip(&tensors)
        .map(|(n, t)| by_name.get(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ts: &[Tensor]| -> Result<(f64, u64)> {
        let mut m = model.clone();
        let mut i = 0;
        m.visit_mut(&mut |n, t, k| {
            if k == ParamKind::Trainable && i < names.len() && names[i] == n {
                t.data_mut().copy_from_slice(ts[i].data());
                i += 1;
            }
        });
        let mut g = Graph::new();
        let out = f(&m, &mut g)?;
        Ok((scalar_output(&g, out)?, g.relu_pattern()))
    };
    check_core(op_name, tensors, &analytic, &eval, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = grad_check(
            "sum3x",
            &[x],
            |g, v| {
                let y = g.scale(v[0], 3.0)?;
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let r = grad_check(
            "const",
            &[x],
            |g, _| g.input(Tensor::scalar(4.0)),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.skipped_unresolvable, 3);
    }

    #[test]
    fn product_with_constant() {
        let x = Tensor::from_fn(&[3], |i| i as f64 * 0.3);
        let r = grad_check(
            "mul",
            std::slice::from_ref(&x),
            |g, v| {
                let c = g.input(x.map(|a| a * a))?;
                let y = g.mul(v[0], c)?;
                g.sum(y)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(rel_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(
            "inf",
            &[x],
            |g, _| g.input(Tensor::new(vec![1], vec![f64::INFINITY]).unwrap()),
            GradCheckOptions::default(),
        );
        assert!(r.is_err());
    }
}
