//! Latitude-weighted MAE, AdamW with a cosine schedule, single-step
//! pretraining, and the two multi-step fine-tuning strategies.
//!
//! Classical autoregressive fine-tuning keeps an `n`-step rollout on one
//! graph, so retained nodes grow with `n`. Relay fine-tuning cuts the rollout
//! into `M` sub-stages of `k` steps: each sub-stage is backpropagated on its
//! own and its last two predictions are detached and handed to the next one,
//! so retained nodes depend on `k` only.
//!
//! Sample order and stochastic depth draw from counter-addressed streams
//! keyed by iteration, so a run resumed from a checkpoint continues exactly
//! as an uninterrupted one.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model, ParamStore};
use crate::rng::Streams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss of one sample: `Σ_τ Σ_{c,i,j} L_i·|Ŷ − Y| / (T·C·H·W)`.
///
/// A batch loss is the mean of these over the batch.
pub fn weighted_mae_loss<T: Scalar>(preds: &[Var<T>], targets: &[Tensor<T>], weights: &[f64]) -> Result<Var<T>> {
    if preds.is_empty() {
        return Err(Error::invalid("weighted_mae_loss: no forecast steps (T = 0)"));
    }
    if preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let g = preds[0].graph();
    let w = g.constant(weight_field(targets[0].shape(), weights)?);
    let mut total: Option<Var<T>> = None;
    for (p, y) in preds.iter().zip(targets) {
        let term = p.sub(&g.constant(y.clone()))?.abs().mul(&w)?.sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let n = (preds.len() * targets[0].numel()) as f64;
    Ok(total.expect("non-empty").scale(1.0 / n))
}

/// Non-differentiable counterpart of [`weighted_mae_loss`] for one field.
pub fn weighted_mae<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "weighted_mae",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let w = weight_field::<f64>(target.shape(), weights)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(w.data())
        .map(|((a, b), l)| l * (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Latitude weights expanded over `[C, H, W]`.
fn weight_field<T: Scalar>(shape: &[usize], weights: &[f64]) -> Result<Tensor<T>> {
    if shape.len() != 3 || shape[1] != weights.len() {
        return Err(Error::InvalidShape {
            op: "weighted_mae_loss",
            detail: format!("field {shape:?} with {} latitude weights", weights.len()),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    Ok(Tensor::from_fn(shape.to_vec(), |i| T::of(weights[(i / w) % h])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = iter.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iters: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
    /// Stop once this many iterations are complete, leaving the schedule
    /// unchanged; lets a run be split into resumable chunks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
}

fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Pretraining hyperparameters of the full-scale setup.
    pub fn pretrain_default() -> Self {
        Self {
            batch_size: 1,
            iters: 100_000,
            lr_initial: 2.5e-4,
            lr_final: 1e-7,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            seed: 0,
            stop_after: None,
        }
    }

    /// Constant-rate fine-tuning of the full-scale setup.
    pub fn finetune_default() -> Self {
        Self {
            iters: 1_000,
            lr_initial: 1e-7,
            lr_final: 1e-7,
            schedule: LrSchedule::Constant,
            ..Self::pretrain_default()
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        match self.schedule {
            LrSchedule::Cosine => cosine_lr(iter, self.iters, self.lr_initial, self.lr_final),
            LrSchedule::Constant => self.lr_initial,
        }
    }

    /// Iteration count at which a call returns.
    pub fn end(&self) -> usize {
        self.stop_after.map_or(self.iters, |s| s.min(self.iters))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr_initial.is_finite()
            && self.lr_final.is_finite()
            && self.lr_initial >= 0.0
            && self.lr_final >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training configuration: {self:?}")))
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Decoupled weight decay `θ ← θ − lr·wd·θ`, then the bias-corrected Adam
/// step. Parameters absent from `grads` get a zero gradient. Rejects the whole
/// step, leaving everything untouched, if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: g.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("non-finite gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::of(lr), T::of(cfg.eps));
    let (b1_t, b2_t) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (ic1, ic2) = (T::of(1.0 / c1), T::of(1.0 / c2));
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.get_mut(name).expect("moment shapes follow params").data_mut();
        let v = state.v.get_mut(name).expect("moment shapes follow params").data_mut();
        for (i, th) in theta.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            *th = *th * decay;
            m[i] = b1_t * m[i] + ob1 * gi;
            v[i] = b2_t * v[i] + ob2 * gi * gi;
            let mhat = m[i] * ic1;
            let vhat = v[i] * ic2;
            *th -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Normalised state sequence at a fixed time step, plus latitude weights.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    pub weights: Vec<f64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(frames: Vec<Tensor<T>>, weights: Vec<f64>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("dataset has no frames"))?;
        if first.rank() != 3 || first.shape()[1] != weights.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!("frame {:?} with {} latitude weights", first.shape(), weights.len()),
            });
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: f.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        Ok(Self { frames, weights })
    }

    /// Number of contiguous windows of `len` frames.
    pub fn windows(&self, len: usize) -> usize {
        (self.frames.len() + 1).saturating_sub(len)
    }

    pub fn window(&self, start: usize, len: usize) -> &[Tensor<T>] {
        &self.frames[start..start + len]
    }

    /// Frames `[from, to)` as a new dataset.
    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            frames: self.frames[from..to].to_vec(),
            weights: self.weights.clone(),
        }
    }
}

/// Window start of the `global`-th sample drawn: epochs cycle through a fresh
/// permutation of all windows.
pub fn sample_start(streams: &Streams, n_windows: usize, global: usize) -> usize {
    let epoch = global / n_windows;
    let mut order: Vec<usize> = (0..n_windows).collect();
    order.shuffle(&mut streams.stream_at("data-order", epoch as u64));
    order[global % n_windows]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Model, optimizer and iteration counter: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    /// Iterations completed so far.
    pub iter: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        let opt = OptimizerState::new(&model.params);
        Self { model, opt, iter: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
    /// High-water mark of live graph nodes over the run.
    pub peak_live_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateCadence {
    /// One optimizer update after every sub-stage.
    #[default]
    PerStage,
    /// Gradients of all sub-stages summed into one update per sequence.
    PerSequence,
}

/// Snapshot taken inside relay fine-tuning right after a sub-stage's
/// backward pass and before its optimizer update.
pub struct StageEvent<'a, T: Scalar> {
    pub iter: usize,
    pub stage: usize,
    /// Relayed `(X_prev, X_curr)` that fed this sub-stage, one per sample.
    pub inputs: &'a [(Tensor<T>, Tensor<T>)],
    /// Targets of this sub-stage, one list per sample.
    pub targets: Vec<&'a [Tensor<T>]>,
    /// Parameters the sub-stage ran with.
    pub params: &'a ParamStore<T>,
    /// Batch gradient of this sub-stage's loss.
    pub grads: &'a BTreeMap<String, Tensor<T>>,
    /// Whether any gradient reached the previous sub-stage's outputs.
    pub upstream_gradient: bool,
}

pub type StageObserver<'a, T> = dyn FnMut(&StageEvent<'_, T>) + 'a;

fn accumulate<T: Scalar>(acc: &mut BTreeMap<String, Tensor<T>>, grads: BTreeMap<String, Tensor<T>>) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g)?,
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

fn check_finite(loss: f64, iter: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("non-finite loss {loss} at iteration {iter}")))
    }
}

/// Rolls `targets.len()` steps from `(x_prev, x_curr)` feeding predictions
/// back undetached. Returns the sample loss and the last two states.
pub fn rollout_loss<T: Scalar>(
    bound: &BoundModel<T>,
    x_prev: Var<T>,
    x_curr: Var<T>,
    targets: &[Tensor<T>],
    weights: &[f64],
    mut rng: Option<&mut crate::rng::StreamRng>,
) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let mut preds = Vec::with_capacity(targets.len());
    let (mut prev, mut curr) = (x_prev, x_curr);
    for _ in targets {
        let next = bound.forward_step(&prev, &curr, rng.as_deref_mut())?;
        preds.push(next.clone());
        prev = std::mem::replace(&mut curr, next);
    }
    let loss = weighted_mae_loss(&preds, targets, weights)?;
    Ok((loss, prev, curr))
}

/// Gradient of the batch loss (mean over samples) for `rollout` steps per
/// sample; the graph of each sample is freed before the next.
fn batch_gradient<T: Scalar>(
    state: &TrainState<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    rollout: usize,
    streams: &Streams,
    peak: &mut usize,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let len = rollout + 2;
    let n = data.windows(len);
    if n == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} frames has no window of {len}",
            data.frames.len()
        )));
    }
    let graph = Graph::new();
    let bound = state.model.bind(&graph, true)?;
    let mut rng = streams.stream_at("droppath", state.iter as u64);
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut total = 0.0;
    let mut acc = BTreeMap::new();
    for b in 0..cfg.batch_size {
        let start = sample_start(streams, n, state.iter * cfg.batch_size + b);
        let w = data.window(start, len);
        let (loss, _, _) = rollout_loss(
            &bound,
            graph.constant(w[0].clone()),
            graph.constant(w[1].clone()),
            &w[2..],
            &data.weights,
            Some(&mut rng),
        )?;
        let loss = loss.scale(inv_b);
        *peak = (*peak).max(graph.peak_live_node_count());
        total += loss.value().item().as_f64();
        accumulate(&mut acc, backward(loss)?.into_named())?;
    }
    Ok((total, acc))
}

/// Single-step pretraining from `state.iter` up to `cfg.iters`.
pub fn pretrain<T: Scalar>(state: &mut TrainState<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    finetune_ar(state, data, 1, cfg)
}

/// Classical autoregressive fine-tuning: one `n`-step rollout per sample on
/// a single graph, the summed loss backpropagated once per iteration.
pub fn finetune_ar<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    n_steps: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n_steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    let streams = Streams::new(cfg.seed);
    let mut out = TrainOutcome::default();
    while state.iter < cfg.end() {
        let lr = cfg.lr(state.iter);
        let (loss, grads) = batch_gradient(state, data, cfg, n_steps, &streams, &mut out.peak_live_nodes)?;
        check_finite(loss, state.iter)?;
        adamw_step(&mut state.model.params, &grads, &mut state.opt, cfg, lr)?;
        out.log.push(LossRecord {
            iter: state.iter,
            lr,
            loss,
        });
        state.iter += 1;
    }
    Ok(out)
}

/// Relay fine-tuning: `stages` sub-stages of `k` steps per sequence.
///
/// The loss record of an iteration is the mean over sub-stages.
pub fn finetune_rar<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    k: usize,
    stages: usize,
    cadence: UpdateCadence,
    cfg: &TrainConfig,
    mut observer: Option<&mut StageObserver<'_, T>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if k == 0 || stages == 0 {
        return Err(Error::invalid(format!(
            "relay needs k ≥ 1 and M ≥ 1, got k={k}, M={stages}"
        )));
    }
    let len = stages * k + 2;
    let n = data.windows(len);
    if n == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} frames has no window of {len}",
            data.frames.len()
        )));
    }
    let streams = Streams::new(cfg.seed);
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut out = TrainOutcome::default();
    while state.iter < cfg.end() {
        let lr = cfg.lr(state.iter);
        let mut rng = streams.stream_at("droppath", state.iter as u64);
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|b| sample_start(&streams, n, state.iter * cfg.batch_size + b))
            .collect();
        let mut inputs: Vec<(Tensor<T>, Tensor<T>)> = starts
            .iter()
            .map(|&s| (data.frames[s].clone(), data.frames[s + 1].clone()))
            .collect();
        // Previous sub-stage outputs, kept only when someone is watching.
        let mut upstream: Vec<(Var<T>, Var<T>)> = Vec::new();
        let mut sequence_grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for s in 0..stages {
            let graph = Graph::new();
            let bound = state.model.bind(&graph, true)?;
            let mut stage_grads = BTreeMap::new();
            let mut next_inputs = Vec::with_capacity(cfg.batch_size);
            let mut next_upstream = Vec::new();
            let mut leaked = false;
            for (b, &start) in starts.iter().enumerate() {
                let targets = &data.frames[start + 2 + s * k..start + 2 + (s + 1) * k];
                let (x0, x1) = &inputs[b];
                let (loss, prev, curr) = rollout_loss(
                    &bound,
                    graph.constant(x0.clone()),
                    graph.constant(x1.clone()),
                    targets,
                    &data.weights,
                    Some(&mut rng),
                )?;
                let loss = loss.scale(inv_b);
                out.peak_live_nodes = out.peak_live_nodes.max(graph.peak_live_node_count());
                loss_sum += loss.value().item().as_f64();
                next_inputs.push((prev.value().clone(), curr.value().clone()));
                if observer.is_some() {
                    prev.retain_grad();
                    curr.retain_grad();
                    next_upstream.push((prev.clone(), curr.clone()));
                }
                drop((prev, curr));
                let grads = backward(loss)?;
                if let Some((p, c)) = upstream.get(b) {
                    leaked |= grads.get(p).is_some() || grads.get(c).is_some();
                }
                accumulate(&mut stage_grads, grads.into_named())?;
            }
            check_finite(loss_sum, state.iter)?;
            if let Some(obs) = observer.as_deref_mut() {
                let targets = starts
                    .iter()
                    .map(|&st| &data.frames[st + 2 + s * k..st + 2 + (s + 1) * k])
                    .collect();
                obs(&StageEvent {
                    iter: state.iter,
                    stage: s,
                    inputs: &inputs,
                    targets,
                    params: &state.model.params,
                    grads: &stage_grads,
                    upstream_gradient: leaked,
                });
            }
            drop(bound);
            match cadence {
                UpdateCadence::PerStage => adamw_step(&mut state.model.params, &stage_grads, &mut state.opt, cfg, lr)?,
                UpdateCadence::PerSequence => accumulate(&mut sequence_grads, stage_grads)?,
            }
            inputs = next_inputs;
            upstream = next_upstream;
        }
        if cadence == UpdateCadence::PerSequence {
            adamw_step(&mut state.model.params, &sequence_grads, &mut state.opt, cfg, lr)?;
        }
        out.log.push(LossRecord {
            iter: state.iter,
            lr,
            loss: loss_sum / stages as f64,
        });
        state.iter += 1;
    }
    Ok(out)
}

/// Mean one-step weighted MAE of `model` over every window of `data`.
pub fn one_step_wmae<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    let n = data.windows(3);
    if n == 0 {
        return Err(Error::invalid("validation set needs at least three frames"));
    }
    let mut total = 0.0;
    for s in 0..n {
        let w = data.window(s, 3);
        let pred = model.rollout(&w[0], &w[1], 1)?;
        total += weighted_mae(&pred[0], &w[2], &data.weights)?;
    }
    Ok(total / n as f64)
}

/// Same metric for the persistence forecast `X̂_{t+1} = X_t`.
pub fn persistence_wmae<T: Scalar>(data: &Dataset<T>) -> Result<f64> {
    let n = data.windows(3);
    if n == 0 {
        return Err(Error::invalid("validation set needs at least three frames"));
    }
    let mut total = 0.0;
    for s in 0..n {
        total += weighted_mae(&data.frames[s + 1], &data.frames[s + 2], &data.weights)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::latitude_weights;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert!((cosine_lr(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-15);
    }

    fn single(name: &str, v: f64) -> ParamStore<f64> {
        ParamStore::from_pairs(vec![(name.to_string(), Tensor::from_f64([1], &[v]).unwrap())]).unwrap()
    }

    fn hp(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::pretrain_default()
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = single("w", 0.0);
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_f64([1], &[1.0]).unwrap())]);
        adamw_step(&mut p, &grads, &mut st, &hp(0.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_decay_only() {
        let mut p = single("w", 1.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &BTreeMap::new(), &mut st, &hp(0.1), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = single("w", 0.7);
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_f64([1], &[0.0]).unwrap())]);
        adamw_step(&mut p, &grads, &mut st, &hp(0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut p = single("w", 0.7);
        let mut st = OptimizerState::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_f64([1], &[f64::NAN]).unwrap())]);
        let err = adamw_step(&mut p, &grads, &mut st, &hp(0.0), 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn loss_worked_examples() {
        let g = Graph::new();
        let l = latitude_weights(&[-45.0, 0.0, 45.0]).unwrap();
        let y = Tensor::<f64>::zeros([1, 3, 1]);
        let p = g.variable(Tensor::from_f64([1, 3, 1], &[1.0, -1.0, 1.0]).unwrap());
        let loss = weighted_mae_loss(&[p.clone()], &[y.clone()], &l).unwrap();
        assert!((loss.value().item() - 1.0).abs() < 1e-12);
        let same = weighted_mae_loss(&[g.constant(y.clone())], &[y.clone()], &l).unwrap();
        assert_eq!(same.value().item(), 0.0);
        assert!(weighted_mae_loss::<f64>(&[], &[], &l).is_err());
    }

    #[test]
    fn sample_order_is_a_permutation_per_epoch() {
        let s = Streams::new(4);
        let mut seen: Vec<usize> = (0..10).map(|i| sample_start(&s, 10, 10 + i)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
