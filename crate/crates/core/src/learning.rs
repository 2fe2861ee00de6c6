//! Training: soft cross-entropy and lazy quadruplet losses, SGD / Adam with
//! their schedules, quadruplet batch assembly, and the task training loops.

use ndarray::{Array1, ArrayD};
use rand::prelude::*;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Binding, BptModel, Mode};
use crate::params::{ParamId, ParamStore, ParamValue};
use crate::pointops::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    PlaceRecognition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Cosine { lr_min: f64 },
    LinearDecay { lr_final: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Margin γ of the first quadruplet term.
    pub gamma: f64,
    /// Margin θ of the second quadruplet term.
    pub theta: f64,
    pub n_positives: usize,
    pub n_negatives: usize,
    /// Anchors drawn per epoch for place recognition (None = every cloud).
    pub anchors_per_epoch: Option<usize>,
    pub label_smoothing: f64,
    /// Shadow weights clip to ±this after each step so the STE window stays
    /// reachable.
    pub shadow_clip: f64,
    /// Global gradient-norm clip; binarized paths can produce near-constant
    /// batch-norm columns whose 1/√var factors explode the backward pass.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// SGD(0.01, 0.9) + cosine annealing, batch 32: the classification recipe.
    pub fn classification(epochs: usize) -> Self {
        TrainConfig {
            task: Task::Classification,
            optimizer: OptimizerKind::Sgd { lr: 0.01, momentum: 0.9 },
            schedule: Schedule::Cosine { lr_min: 0.0 },
            epochs,
            batch_size: 32,
            gamma: 0.5,
            theta: 0.2,
            n_positives: 2,
            n_negatives: 8,
            anchors_per_epoch: None,
            label_smoothing: 0.2,
            shadow_clip: 1.05,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }

    /// Adam(5e-5) decaying to 1e-5, quadruplets of 1+2+8: the place
    /// recognition recipe.
    pub fn place_recognition(epochs: usize) -> Self {
        TrainConfig {
            task: Task::PlaceRecognition,
            optimizer: OptimizerKind::Adam { lr: 5e-5 },
            schedule: Schedule::LinearDecay { lr_final: 1e-5 },
            epochs,
            batch_size: 1,
            gamma: 0.5,
            theta: 0.2,
            n_positives: 2,
            n_negatives: 8,
            anchors_per_epoch: None,
            label_smoothing: 0.0,
            shadow_clip: 1.05,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

// --- Losses -----------------------------------------------------------------

/// Soft cross-entropy on the graph: `−Σ target · log_softmax(logits)`.
/// The target is an explicit distribution; label smoothing is applied by the
/// caller.
pub fn soft_cross_entropy_graph(g: &Graph, logits: &Var, target: &Array1<f64>) -> Result<Var> {
    if logits.shape() != vec![target.len()] {
        return Err(Error::DimMismatch(format!(
            "logits {:?} vs target {}",
            logits.shape(),
            target.len()
        )));
    }
    let t = g.constant(target.clone().into_dyn());
    logits.log_softmax()?.mul(&t)?.sum_all().scale(-1.0).into_ok()
}

trait IntoOk<T> {
    fn into_ok(self) -> Result<T>;
}

impl IntoOk<Var> for Var {
    fn into_ok(self) -> Result<Var> {
        Ok(self)
    }
}

/// One-hot distribution with label smoothing.
pub fn smoothed_one_hot(num_classes: usize, label: usize, smoothing: f64) -> Array1<f64> {
    let mut t = Array1::from_elem(num_classes, smoothing / num_classes as f64);
    t[label] += 1.0 - smoothing;
    t
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lazy quadruplet loss on plain descriptors:
/// `[max_i d(a,p_i) − min_j d(a,n_j) + γ]₊ + [max_i d(a,p_i) − min_j d(n*,n_j) + θ]₊`
/// with squared Euclidean distances — identical to the max over all (i,j)
/// pairs of the per-pair hinges.
pub fn lazy_quadruplet_loss(
    anchor: &Array1<f64>,
    positives: &[Array1<f64>],
    negatives: &[Array1<f64>],
    extra_negative: &Array1<f64>,
    gamma: f64,
    theta: f64,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("quadruplet needs at least one positive and one negative".into()));
    }
    let dim = anchor.len();
    for d in positives.iter().chain(negatives.iter()).chain(std::iter::once(extra_negative)) {
        if d.len() != dim {
            return Err(Error::DimMismatch("descriptor dimensions differ".into()));
        }
    }
    let max_dp = positives.iter().map(|p| sq_dist(anchor, p)).fold(f64::NEG_INFINITY, f64::max);
    let min_dn = negatives.iter().map(|n| sq_dist(anchor, n)).fold(f64::INFINITY, f64::min);
    let min_dn_star =
        negatives.iter().map(|n| sq_dist(extra_negative, n)).fold(f64::INFINITY, f64::min);
    Ok((max_dp - min_dn + gamma).max(0.0) + (max_dp - min_dn_star + theta).max(0.0))
}

fn sq_dist_graph(a: &Var, b: &Var) -> Result<Var> {
    a.sub(b)?.square()?.sum_all().into_ok()
}

fn stack_scalars(g: &Graph, xs: &[Var]) -> Result<Var> {
    let reshaped: Vec<Var> = xs
        .iter()
        .map(|v| v.reshape(&[1]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&reshaped, 0)
}

/// Graph version of the lazy quadruplet loss (hinges over all (i,j) pairs,
/// reduced by max).
pub fn lazy_quadruplet_loss_graph(
    g: &Graph,
    anchor: &Var,
    positives: &[Var],
    negatives: &[Var],
    extra_negative: &Var,
    gamma: f64,
    theta: f64,
) -> Result<Var> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("quadruplet needs at least one positive and one negative".into()));
    }
    let dp: Vec<Var> =
        positives.iter().map(|p| sq_dist_graph(anchor, p)).collect::<Result<Vec<_>>>()?;
    let dn: Vec<Var> =
        negatives.iter().map(|n| sq_dist_graph(anchor, n)).collect::<Result<Vec<_>>>()?;
    let dn_star: Vec<Var> = negatives
        .iter()
        .map(|n| sq_dist_graph(extra_negative, n))
        .collect::<Result<Vec<_>>>()?;
    let dp = stack_scalars(g, &dp)?;
    let dn = stack_scalars(g, &dn)?;
    let dn_star = stack_scalars(g, &dn_star)?;
    let term1 = dp.outer_sub(&dn)?.add_scalar(gamma).relu().max_axis(1)?.max_axis(0)?;
    let term2 = dp.outer_sub(&dn_star)?.add_scalar(theta).relu().max_axis(1)?.max_axis(0)?;
    term1.add(&term2)
}

// --- Optimizers and schedules ------------------------------------------------

/// Classic momentum SGD step: `v ← momentum·v + g; w ← w − lr·v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for i in 0..param.len() {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam step with bias correction; `t` counts steps starting at 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total` steps.
pub fn cosine_schedule(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear decay from `lr0` to `lr_final` over `total` steps.
pub fn linear_schedule(step: usize, total: usize, lr0: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    lr0 + (lr_final - lr0) * t
}

/// Per-parameter optimizer state over a whole store.
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, e)| e.value.len()).collect();
        let zeros = |s: &[usize]| s.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Sgd { .. } => Optimizer {
                kind,
                velocity: zeros(&sizes),
                m: vec![],
                v: vec![],
                t: 0,
            },
            OptimizerKind::Adam { .. } => Optimizer {
                kind,
                velocity: vec![],
                m: zeros(&sizes),
                v: zeros(&sizes),
                t: 0,
            },
        }
    }

    /// Apply one step with the given per-parameter gradients (None = zero
    /// gradient, parameter still decays through momentum state).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        lr: f64,
        shadow_clip: f64,
    ) {
        self.t += 1;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let len = store.param(id).value.len();
            let owned: Vec<f64> = match &grads[i] {
                Some(g) => g.iter().cloned().collect(),
                None => vec![0.0; len],
            };
            let gslice: &[f64] = &owned;
            let is_latent = matches!(store.param(id).value, ParamValue::Latent(_));
            match self.kind {
                OptimizerKind::Sgd { momentum, .. } => {
                    let vel = &mut self.velocity[i];
                    store.apply_update(id, |p| {
                        sgd_step(p, gslice, vel, lr, momentum);
                        if is_latent {
                            clip(p, shadow_clip);
                        }
                    });
                }
                OptimizerKind::Adam { .. } => {
                    let (m, v, t) = (&mut self.m[i], &mut self.v[i], self.t);
                    store.apply_update(id, |p| {
                        adam_step(p, gslice, m, v, t, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
                        if is_latent {
                            clip(p, shadow_clip);
                        }
                    });
                }
            }
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sgd { lr, .. } => lr,
            OptimizerKind::Adam { lr } => lr,
        }
    }
}

fn clip(p: &mut [f64], limit: f64) {
    for v in p.iter_mut() {
        *v = v.clamp(-limit, limit);
    }
}

// --- Datasets and batches ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassificationSet {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Place-recognition set: clouds with 2-D poses plus the distance thresholds
/// that define positives and negatives.
#[derive(Debug, Clone)]
pub struct PlaceSet {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<[f64; 2]>,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
}

impl PlaceSet {
    pub fn pose_dist(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.poses[a], self.poses[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadrupletIndices {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub extra_negative: usize,
}

/// Anchor + positive set + negative set + extra negative (far from the anchor
/// and from every chosen negative).
#[derive(Debug, Clone)]
pub struct QuadrupletBatch {
    pub anchor: PointCloud,
    pub positives: Vec<PointCloud>,
    pub negatives: Vec<PointCloud>,
    pub extra_negative: PointCloud,
}

impl QuadrupletBatch {
    pub fn from_indices(set: &PlaceSet, idx: &QuadrupletIndices) -> Self {
        QuadrupletBatch {
            anchor: set.clouds[idx.anchor].clone(),
            positives: idx.positives.iter().map(|&i| set.clouds[i].clone()).collect(),
            negatives: idx.negatives.iter().map(|&i| set.clouds[i].clone()).collect(),
            extra_negative: set.clouds[idx.extra_negative].clone(),
        }
    }
}

/// Sample a quadruplet for `anchor`. Returns Ok(None) as the skip signal when
/// the anchor has no admissible positive; errors when negatives cannot be
/// found at all (degenerate dataset).
pub fn build_quadruplet_batch(
    set: &PlaceSet,
    anchor: usize,
    n_positives: usize,
    n_negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<QuadrupletIndices>> {
    let n = set.clouds.len();
    if anchor >= n {
        return Err(Error::Data(format!("anchor index {anchor} out of range")));
    }
    let pos_pool: Vec<usize> = (0..n)
        .filter(|&i| i != anchor && set.pose_dist(anchor, i) < set.pos_threshold)
        .collect();
    if pos_pool.is_empty() {
        return Ok(None);
    }
    let neg_pool: Vec<usize> =
        (0..n).filter(|&i| set.pose_dist(anchor, i) > set.neg_threshold).collect();
    if neg_pool.len() < n_negatives + 1 {
        return Err(Error::Data("not enough negatives beyond the threshold".into()));
    }
    let positives: Vec<usize> = if pos_pool.len() >= n_positives {
        sample(rng, pos_pool.len(), n_positives).iter().map(|i| pos_pool[i]).collect()
    } else {
        // fewer candidates than requested: sample with replacement
        (0..n_positives).map(|_| pos_pool[rng.random_range(0..pos_pool.len())]).collect()
    };
    let negatives: Vec<usize> =
        sample(rng, neg_pool.len(), n_negatives).iter().map(|i| neg_pool[i]).collect();
    let star_pool: Vec<usize> = neg_pool
        .iter()
        .copied()
        .filter(|&c| {
            !negatives.contains(&c)
                && negatives.iter().all(|&nj| set.pose_dist(c, nj) > set.neg_threshold)
        })
        .collect();
    if star_pool.is_empty() {
        return Ok(None);
    }
    let extra_negative = star_pool[rng.random_range(0..star_pool.len())];
    Ok(Some(QuadrupletIndices { anchor, positives, negatives, extra_negative }))
}

// --- Training loops ----------------------------------------------------------

/// One structured record per logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

fn schedule_lr(cfg: &TrainConfig, opt: &Optimizer, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Cosine { lr_min } => cosine_schedule(step, total, opt.base_lr(), lr_min),
        Schedule::LinearDecay { lr_final } => {
            linear_schedule(step, total, opt.base_lr(), lr_final)
        }
    }
}

fn collect_grads(model: &BptModel, bind: &Binding) -> Vec<Option<ArrayD<f64>>> {
    model.store().iter().map(|(id, _)| bind.grad(id)).collect()
}

/// Scale all gradients jointly so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<ArrayD<f64>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    total
}

/// Classification training: mini-batches of clouds, mean soft cross-entropy.
pub fn train_classification(
    model: &mut BptModel,
    data: &ClassificationSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if data.clouds.len() != data.labels.len() || data.clouds.is_empty() {
        return Err(Error::Data("empty or inconsistent classification set".into()));
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model.store());
    let batches_per_epoch = data.clouds.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.clouds.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = schedule_lr(cfg, &opt, step, total_steps);
            let g = Graph::new();
            let mut bind = model.bind();
            let batch: Vec<&PointCloud> = chunk.iter().map(|&ci| &data.clouds[ci]).collect();
            let logits_vec = model.forward_batch_graph(&g, &mut bind, &batch, Mode::Train, 0)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for (&ci, logits) in chunk.iter().zip(logits_vec.iter()) {
                let target =
                    smoothed_one_hot(data.num_classes, data.labels[ci], cfg.label_smoothing);
                losses.push(soft_cross_entropy_graph(&g, logits, &target)?);
            }
            let loss = stack_scalars(&g, &losses)?.mean_axis(0)?;
            g.backward(&loss)?;
            let mut grads = collect_grads(model, &bind);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.store_mut(), &grads, lr, cfg.shadow_clip);
            log.records.push(TrainRecord {
                epoch,
                step,
                loss: loss.scalar_value(),
                lr,
                wall_ms: start.elapsed().as_millis(),
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Place-recognition training: one quadruplet per step through the lazy
/// quadruplet loss.
pub fn train_place_recognition(
    model: &mut BptModel,
    data: &PlaceSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if data.clouds.is_empty() {
        return Err(Error::Data("empty place set".into()));
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model.store());
    let anchors_per_epoch = cfg.anchors_per_epoch.unwrap_or(data.clouds.len());
    let total_steps = cfg.epochs * anchors_per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.clouds.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(anchors_per_epoch);
        for &anchor in &order {
            let Some(q) =
                build_quadruplet_batch(data, anchor, cfg.n_positives, cfg.n_negatives, &mut rng)?
            else {
                continue;
            };
            let lr = schedule_lr(cfg, &opt, step, total_steps);
            let g = Graph::new();
            let mut bind = model.bind();
            // one batched graph over the whole tuple: anchor, positives,
            // negatives, extra negative
            let mut ids = vec![q.anchor];
            ids.extend(&q.positives);
            ids.extend(&q.negatives);
            ids.push(q.extra_negative);
            let batch: Vec<&PointCloud> = ids.iter().map(|&ci| &data.clouds[ci]).collect();
            let descs = model.forward_batch_graph(&g, &mut bind, &batch, Mode::Train, 0)?;
            let f_a = descs[0].clone();
            let f_p: Vec<Var> = descs[1..1 + q.positives.len()].to_vec();
            let f_n: Vec<Var> =
                descs[1 + q.positives.len()..1 + q.positives.len() + q.negatives.len()].to_vec();
            let f_star = descs.last().expect("tuple has the extra negative").clone();
            let loss =
                lazy_quadruplet_loss_graph(&g, &f_a, &f_p, &f_n, &f_star, cfg.gamma, cfg.theta)?;
            g.backward(&loss)?;
            let mut grads = collect_grads(model, &bind);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.store_mut(), &grads, lr, cfg.shadow_clip);
            log.records.push(TrainRecord {
                epoch,
                step,
                loss: loss.scalar_value(),
                lr,
                wall_ms: start.elapsed().as_millis(),
            });
            step += 1;
        }
    }
    Ok(log)
}
