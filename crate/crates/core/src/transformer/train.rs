//! Minibatch AdamW training over pre-tokenized documents.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamWConfig, AdamWState};
use super::params::Model;
use super::{batch_grad, AuxHead, Example, LossNormalization, ObjectiveScale};
use crate::error::{Error, Result};
use crate::rng::{mix, seeded};

/// What the per-position targets of a training set mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Predict the cumulative state after every action.
    State,
    /// Plain next-token prediction.
    NextToken,
    /// Predict the parity of the cumulative state.
    Parity,
    /// Predict the final state at sentence-final period tokens only.
    NaturalLanguage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxTarget {
    /// State parity (2 classes).
    Parity,
    /// State parity crossed with the current action.
    ParityAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxParityConfig {
    pub layer: usize,
    pub target: AuxTarget,
    #[serde(default = "default_aux_weight")]
    pub weight: f64,
}

fn default_aux_weight() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to `min_ratio * lr` at the last step.
    WarmupCosine { warmup_steps: u64, min_ratio: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_steps, min_ratio } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let frac = ((step - warmup_steps) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                base * (min_ratio + (1.0 - min_ratio) * cos)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Evaluate every this many steps (and at the end of each epoch); 0
    /// evaluates only at epoch ends.
    pub eval_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    pub loss_mode: LossMode,
    #[serde(default = "default_normalization")]
    pub normalization: LossNormalization,
    #[serde(default)]
    pub aux_parity: Option<AuxParityConfig>,
    pub schedule: LrSchedule,
    /// Seed of the per-epoch shuffle, independent of the init seed.
    pub data_seed: u64,
    /// Stop once every entry of the evaluated accuracy curve reaches this.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Examples per gradient shard. Fixed so results do not depend on the
    /// number of worker threads.
    #[serde(default = "default_shard")]
    pub shard_size: usize,
}

fn default_eps() -> f64 {
    1e-8
}
fn default_log_every() -> u64 {
    10
}
fn default_normalization() -> LossNormalization {
    LossNormalization::Mean
}
fn default_shard() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_every: 0,
            log_every: 10,
            loss_mode: LossMode::State,
            normalization: LossNormalization::Mean,
            aux_parity: None,
            schedule: LrSchedule::WarmupCosine { warmup_steps: 200, min_ratio: 0.1 },
            data_seed: 0,
            target_accuracy: None,
            shard_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.shard_size == 0 {
            return fail("epochs, batch_size and shard_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return fail("learning_rate and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative");
        }
        if let Some(aux) = &self.aux_parity {
            if aux.weight < 0.0 {
                return fail("aux_parity.weight must be non-negative");
            }
        }
        if let LrSchedule::WarmupCosine { min_ratio, .. } = self.schedule {
            if !(0.0..=1.0).contains(&min_ratio) {
                return fail("min_ratio must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainDoc {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
    pub aux_targets: Option<Vec<u32>>,
}

/// Documents with targets already laid out for one loss mode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub mode: LossMode,
    pub docs: Vec<TrainDoc>,
    /// Class count of `aux_targets`, when present.
    pub aux_classes: Option<usize>,
}

/// Generalization metrics reported by an evaluation callback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Accuracy at each sequence length 1, 2, ...
    pub accuracy_by_length: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parity_by_length: Option<Vec<f64>>,
}

impl EvalMetrics {
    pub fn min_accuracy(&self) -> f64 {
        self.accuracy_by_length.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainOutcome {
    Completed,
    ReachedTarget,
    /// Stopped by `Hooks::stop_after_steps`; resumable.
    Interrupted,
}

/// Where training stands, so an interrupted run can pick up exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPosition {
    pub stage: usize,
    pub epoch: usize,
    /// Next batch within the epoch.
    pub batch: usize,
    /// Optimizer steps within the current stage.
    pub step: u64,
    /// Optimizer steps over all stages.
    pub global_step: u64,
    pub finished: bool,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamWState<f32>,
    pub aux: Option<AuxHead<f32>>,
    pub aux_opt: Option<AdamWState<f32>>,
    pub position: TrainPosition,
    pub log: Vec<TrainRecord>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let n = model.len();
        Self { model, opt: AdamWState::new(n), aux: None, aux_opt: None, position: TrainPosition::default(), log: Vec::new() }
    }

    /// Start a new curriculum stage from the current parameters. Optimizer
    /// moments and the auxiliary head are reset.
    pub fn next_stage(&mut self) {
        self.opt = AdamWState::new(self.model.len());
        self.aux = None;
        self.aux_opt = None;
        let p = &mut self.position;
        *p = TrainPosition { stage: p.stage + 1, global_step: p.global_step, ..TrainPosition::default() };
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.log {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Malformed { line: i + 1, msg: e.to_string() }))
        .collect()
}

/// Optional callbacks during training.
#[derive(Default)]
pub struct Hooks<'a> {
    pub eval: Option<&'a mut dyn FnMut(&Model) -> Result<EvalMetrics>>,
    /// Return after this many global steps, leaving the state resumable.
    pub stop_after_steps: Option<u64>,
}

fn batches_per_epoch(n_docs: usize, batch: usize) -> usize {
    n_docs.div_ceil(batch)
}

fn epoch_order(n: usize, data_seed: u64, stage: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(mix(data_seed, stage as u64), epoch as u64));
    order
}

fn check_data(data: &TrainingData, cfg: &TrainConfig, model: &Model) -> Result<()> {
    if data.mode != cfg.loss_mode {
        return Err(Error::Config(format!("corpus prepared for {:?} but loss_mode is {:?}", data.mode, cfg.loss_mode)));
    }
    if data.docs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for (i, d) in data.docs.iter().enumerate() {
        if d.targets.len() != d.tokens.len() {
            return Err(Error::Data(format!("document {i}: {} targets for {} tokens", d.targets.len(), d.tokens.len())));
        }
        if d.tokens.len() > model.cfg.max_positions {
            return Err(Error::Data(format!("document {i} longer than max_positions")));
        }
        if cfg.aux_parity.is_some() && d.aux_targets.as_ref().is_none_or(|a| a.len() != d.tokens.len()) {
            return Err(Error::Data(format!("document {i}: missing or short aux targets")));
        }
    }
    if let Some(aux) = &cfg.aux_parity {
        if aux.layer > model.cfg.n_layers {
            return Err(Error::Config(format!("aux layer {} beyond {} layers", aux.layer, model.cfg.n_layers)));
        }
        if data.aux_classes.is_none() {
            return Err(Error::Data("aux head enabled but the data has no aux classes".into()));
        }
    }
    Ok(())
}

fn clip(grads: &mut [f32], aux: Option<&mut Vec<f32>>, norm: f64, max: f64) {
    if max <= 0.0 || norm <= max {
        return;
    }
    let s = (max / norm) as f32;
    grads.iter_mut().for_each(|g| *g *= s);
    if let Some(a) = aux {
        a.iter_mut().for_each(|g| *g *= s);
    }
}

/// Train `state` on `data` until the configured epochs finish, the target
/// accuracy is reached, or `hooks.stop_after_steps` is hit. On divergence
/// the error is returned and `state.log` keeps the records so far.
pub fn train(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig, hooks: &mut Hooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data, cfg, &state.model)?;
    if state.position.finished {
        return Ok(TrainOutcome::Completed);
    }
    if let Some(a) = &cfg.aux_parity {
        if state.aux.is_none() {
            let classes = data.aux_classes.expect("checked");
            let seed = mix(state.model.cfg.seed, 0xA0C5 + state.position.stage as u64);
            let head = AuxHead::init(state.model.cfg.d_model, a.layer, classes, a.weight, seed);
            state.aux_opt = Some(AdamWState::new(head.params.len()));
            state.aux = Some(head);
        }
    }
    let opt_cfg = cfg.adamw();
    let mask = state.model.layout.decay_mask();
    let aux_mask: Option<Vec<bool>> = state.aux.as_ref().map(|h| {
        let w = state.model.cfg.d_model * h.classes;
        (0..h.params.len()).map(|i| i < w).collect()
    });
    let n = data.docs.len();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs) as u64;

    while state.position.epoch < cfg.epochs {
        let order = epoch_order(n, cfg.data_seed, state.position.stage, state.position.epoch);
        while state.position.batch < per_epoch {
            if hooks.stop_after_steps.is_some_and(|s| state.position.global_step >= s) {
                return Ok(TrainOutcome::Interrupted);
            }
            let b = state.position.batch;
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let examples: Vec<Example> = idx
                .iter()
                .map(|&i| {
                    let d = &data.docs[i];
                    Example { tokens: &d.tokens, targets: &d.targets, aux_targets: d.aux_targets.as_deref() }
                })
                .collect();
            let targeted: usize = examples.iter().map(|e| e.targets.iter().filter(|t| t.is_some()).count()).sum();
            if targeted == 0 {
                return Err(Error::Data("batch without targeted positions".into()));
            }
            let aux_count: usize = examples.iter().map(|e| e.tokens.len()).sum();
            let aux_weight = state.aux.as_ref().map_or(0.0, |h| h.weight);
            let scale = match cfg.normalization {
                LossNormalization::Mean => ObjectiveScale { main: 1.0 / targeted as f64, aux: aux_weight / aux_count as f64 },
                LossNormalization::Sum => ObjectiveScale { main: 1.0, aux: aux_weight },
            };
            let mut g = batch_grad(&state.model, &examples, scale, state.aux.as_ref(), cfg.shard_size)?;
            let norm = g.global_norm();
            let loss = g.loss_sum / g.targeted as f64;
            if !norm.is_finite() || !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {}", state.position.global_step)));
            }
            clip(&mut g.model, g.aux.as_mut(), norm, cfg.grad_clip);
            let lr = cfg.schedule.lr_at(cfg.learning_rate, state.position.step, total_steps);
            adamw_step(&mut state.model.data, &g.model, &mut state.opt, &opt_cfg, lr, Some(&mask))?;
            if let (Some(head), Some(ga), Some(aopt)) = (state.aux.as_mut(), g.aux.as_ref(), state.aux_opt.as_mut()) {
                adamw_step(&mut head.params, ga, aopt, &opt_cfg, lr, aux_mask.as_deref())?;
            }
            state.position.batch += 1;
            state.position.step += 1;
            state.position.global_step += 1;

            let step = state.position.step;
            let end_of_epoch = state.position.batch == per_epoch;
            let due_eval = end_of_epoch || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
            let due_log = due_eval || step == 1 || (cfg.log_every > 0 && step % cfg.log_every == 0);
            if due_log {
                let eval = match (&mut hooks.eval, due_eval) {
                    (Some(f), true) => Some(f(&state.model)?),
                    _ => None,
                };
                let reached = match (&eval, cfg.target_accuracy) {
                    (Some(m), Some(t)) => !m.accuracy_by_length.is_empty() && m.min_accuracy() >= t,
                    _ => false,
                };
                state.log.push(TrainRecord {
                    stage: state.position.stage,
                    epoch: state.position.epoch,
                    step,
                    loss,
                    aux_loss: (g.aux_targeted > 0).then(|| g.aux_loss_sum / g.aux_targeted as f64),
                    lr,
                    grad_norm: norm,
                    eval,
                });
                if reached {
                    state.position.finished = true;
                    return Ok(TrainOutcome::ReachedTarget);
                }
            }
        }
        state.position.epoch += 1;
        state.position.batch = 0;
    }
    state.position.finished = true;
    Ok(TrainOutcome::Completed)
}
