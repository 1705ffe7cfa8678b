//! Deterministic mini-batch training with Adam and polynomial learning-rate
//! decay.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::losses::{self, LossTargets, LossTerms};
use crate::model::{RefVars, RfmNet};
use crate::nn::{tensor_seed, ParamKind, Params};
use crate::rif::FusionKind;
use crate::tensor::Tensor;

/// `lr_init · (1 − t/T)^power`.
pub fn poly_lr(lr_init: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    lr_init * (1.0 - t as f64 / total as f64).max(0.0).powf(power)
}

/// Adam with per-tensor moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every trainable tensor that has a gradient.
    pub fn step(&mut self, params: &mut dyn Params, grads: &IndexMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, t, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let Some(gr) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; t.numel()], vec![0.0; t.numel()]));
            for (((p, &g), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl StepLog {
    pub const TSV_HEADER: &'static str = "step\tlr\tL1\tL2\tL3\tL4\ttotal";

    pub fn tsv_row(&self) -> String {
        let l = self.terms.per_level;
        format!(
            "{}\t{:.6e}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            self.step, self.lr, l[0], l[1], l[2], l[3], self.terms.total
        )
    }
}

fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap();
    let mut out = t.detached();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Supplies training batches in a seeded order. Sample order, reference
/// choice and augmentation use independent streams, so arms that differ only
/// in their fusion kind see identical image batches.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    order_rng: ChaCha8Rng,
    ref_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

pub struct Batch {
    pub images: Tensor,
    pub refs: Option<Tensor>,
    pub targets: LossTargets,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            order_rng: ChaCha8Rng::seed_from_u64(tensor_seed(seed, "order")),
            ref_rng: ChaCha8Rng::seed_from_u64(tensor_seed(seed, "refs")),
            aug_rng: ChaCha8Rng::seed_from_u64(tensor_seed(seed, "augment")),
        }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.order_rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn next_batch(&mut self, net: &RfmNet, data: &Split, cfg: &TrainConfig) -> Result<Batch> {
        let sizes: Vec<(usize, usize)> = net.cfg.level_sizes().iter().map(|&s| (s, s)).collect();
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut refs = Vec::new();
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &data.samples[self.next_index()];
            let flip = self.aug_rng.random::<bool>() && cfg.flip;
            let (img, mask) = if flip {
                (flip_horizontal(&s.image), flip_horizontal(&s.mask))
            } else {
                (s.image.clone(), s.mask.clone())
            };
            images.push(img);
            targets.push(LossTargets::new(&mask, &sizes)?);
            match net.cfg.fusion.kind {
                FusionKind::Image => {
                    let pool = &data.refs[s.category];
                    let k = net.cfg.fusion.num_refs;
                    if pool.len() < k {
                        return Err(Error::InvalidArgument(format!(
                            "category {} has {} references, {k} requested",
                            s.category,
                            pool.len()
                        )));
                    }
                    for i in rand::seq::index::sample(&mut self.ref_rng, pool.len(), k) {
                        refs.push(pool[i].clone());
                    }
                }
                FusionKind::Text => refs.push(data.text[s.category].clone()),
                FusionKind::None => {}
            }
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            refs: if refs.is_empty() {
                None
            } else {
                Some(Tensor::stack(&refs)?)
            },
            targets: LossTargets::stack(&targets)?,
        })
    }
}

/// Forward and backward pass on one batch. Returns the loss terms, the
/// per-name gradients and the graph (for its batch statistics).
pub fn loss_and_grads(net: &RfmNet, batch: &Batch, mode: Mode) -> Result<(LossTerms, IndexMap<String, Tensor>, Graph)> {
    let mut g = Graph::new();
    let x = g.input(batch.images.clone())?;
    let r = match (&batch.refs, net.cfg.fusion.kind) {
        (Some(t), FusionKind::Image) => RefVars::Images(g.input(t.clone())?),
        (Some(t), FusionKind::Text) => RefVars::Text(g.input(t.clone())?),
        _ => RefVars::None,
    };
    let out = net.forward_graph(&mut g, x, r, mode)?;
    let (total, levels) = losses::total_loss_graph(&mut g, out.decoded.p, &batch.targets)?;
    let per_level = [0, 1, 2, 3].map(|i| g.value(levels[i]).item());
    let terms = LossTerms {
        per_level,
        total: g.value(total).item(),
    };
    let grads = g.backward(total)?.by_name(&g);
    Ok((terms, grads, g))
}

/// Trains `net` in place for `cfg.steps` steps. `on_step` sees every step's
/// log entry as it is produced.
pub fn train(
    net: &mut RfmNet,
    data: &Split,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.samples.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut sampler = BatchSampler::new(data.samples.len(), seed);
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(net, data, cfg)?;
        let (terms, grads, mut g) = loss_and_grads(net, &batch, Mode::Train).map_err(|e| match e {
            Error::NonFinite { op } => {
                Error::Training(format!("non-finite value in {op} at step {step}; lower train.lr"))
            }
            other => other,
        })?;
        if !terms.total.is_finite() {
            return Err(Error::Training(format!("loss became {} at step {step}", terms.total)));
        }
        let lr = poly_lr(cfg.lr_init, step, cfg.steps, cfg.poly_power);
        adam.step(net, &grads, lr);
        net.apply_batch_stats(&g.take_batch_stats());
        let entry = StepLog { step, lr, terms };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
