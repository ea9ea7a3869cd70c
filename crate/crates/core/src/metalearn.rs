//! Reptile-style meta learning with a fixed/adaptive parameter partition.
//!
//! Offline, the meta parameters θ⁰ are trained over source users: every outer
//! iteration adapts a copy of θ⁰ to each sampled user with a few SGD steps and
//! then moves θ⁰ toward the mean of the adapted copies.
//!
//! Online, users arrive one after another. Each user model starts from θ⁰, scores
//! every item before seeing its label, and adapts only the adaptive segments on
//! buffered mini-batches. Every `outer_batch` users the adaptive part of θ⁰ moves
//! toward the users' adapted parameters; the fixed part never changes.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{mix2, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{EvalLog, LogEntry};
use crate::model::{partition_mask, predict_ctr, Example, NetworkTopology, PartitionMask, PartitionSpec};
use crate::nncore::{self, GradientSet, ParameterSet};

const SALT_OFFLINE: u64 = 0x6f66_666c;
const SALT_BASE: u64 = 0x6261_7365;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Inner (per-user) SGD learning rate α.
    pub inner_lr: f64,
    pub inner_batch: usize,
    /// SGD steps per inner adaptation (offline) or per buffered batch (online).
    pub inner_iters: usize,
    /// Offline outer learning rate β, annealed linearly from start to end.
    pub outer_lr_start: f64,
    pub outer_lr_end: f64,
    /// Users per outer update, offline and online.
    pub outer_batch: usize,
    /// Offline outer iterations M.
    pub outer_iters: usize,
    /// Meta-gradient scale ε.
    pub epsilon: f64,
    /// Online outer learning rate, annealed over the online outer updates.
    pub online_outer_lr_start: f64,
    pub online_outer_lr_end: f64,
    /// Plain SGD settings of the unified base model.
    pub base_lr: f64,
    pub base_epochs: usize,
    pub base_batch: usize,
}

impl Hyperparams {
    /// Production settings: α 0.02, inner batch 4, 5 inner steps, β 1.0 → 0.0,
    /// outer batch 5, 100k outer iterations.
    pub fn production() -> Self {
        Self {
            inner_lr: 0.02,
            outer_iters: 100_000,
            ..Self::desk()
        }
    }

    /// Settings for desk-size populations. Users adapt from far fewer
    /// records, so the inner rate is larger than the production 0.02.
    pub fn desk() -> Self {
        Self {
            inner_lr: 0.1,
            inner_batch: 4,
            inner_iters: 5,
            outer_lr_start: 1.0,
            outer_lr_end: 0.0,
            outer_batch: 5,
            outer_iters: 4000,
            epsilon: 1.0,
            online_outer_lr_start: 1.0,
            online_outer_lr_end: 0.0,
            base_lr: 0.02,
            base_epochs: 4,
            base_batch: 4,
        }
    }

    /// Best point of the inner-loop tuning sweep: 3 inner iterations at α 0.02.
    pub fn tuned_inner() -> Self {
        Self {
            inner_iters: 3,
            ..Self::production()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("inner_lr", self.inner_lr),
            ("outer_lr_start", self.outer_lr_start),
            ("outer_lr_end", self.outer_lr_end),
            ("online_outer_lr_start", self.online_outer_lr_start),
            ("online_outer_lr_end", self.online_outer_lr_end),
            ("base_lr", self.base_lr),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.outer_lr_start < self.outer_lr_end {
            return Err(Error::config("outer_lr_start must be >= outer_lr_end"));
        }
        if self.online_outer_lr_start < self.online_outer_lr_end {
            return Err(Error::config("online_outer_lr_start must be >= online_outer_lr_end"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be positive"));
        }
        for (name, v) in [
            ("inner_batch", self.inner_batch),
            ("inner_iters", self.inner_iters),
            ("outer_batch", self.outer_batch),
            ("base_batch", self.base_batch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::desk()
    }
}

/// Meta parameters θ⁰ and the outer-loop position.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub theta0: ParameterSet,
    pub outer_step: usize,
    pub rng_seed: u64,
}

/// One prequential prediction, recorded before its label was used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub theta_tilde: ParameterSet,
    pub predictions: Vec<Prediction>,
}

/// How the inner loop draws its mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSampling {
    /// `inner_iters` steps, each on `inner_batch` examples drawn with
    /// replacement. Tasks no larger than one batch are used whole.
    Offline { seed: u64 },
    /// Items in arrival order: predict, buffer, and run `inner_iters` steps
    /// whenever the buffer fills or the session ends.
    Online,
}

/// U_τ^k: adapt θ⁰ to one task. Only adaptive segments move.
pub fn inner_adapt(
    theta0: &ParameterSet,
    task: &TaskDataset,
    hp: &Hyperparams,
    mask: &PartitionMask,
    topology: &NetworkTopology,
    sampling: InnerSampling,
) -> Result<AdaptResult> {
    if task.is_empty() {
        return Err(Error::contract(format!("task of user {} is empty", task.user_id)));
    }
    mask.check(theta0)?;
    let mut theta = theta0.clone();
    let mut predictions = Vec::new();
    match sampling {
        InnerSampling::Offline { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut batch: Vec<Example> = Vec::with_capacity(hp.inner_batch);
            for _ in 0..hp.inner_iters {
                let batch_ref: &[Example] = if task.len() <= hp.inner_batch {
                    &task.examples
                } else {
                    batch.clear();
                    batch.extend(
                        (0..hp.inner_batch).map(|_| task.examples[rng.random_range(0..task.len())].clone()),
                    );
                    &batch
                };
                let grads = nncore::backward(&theta, topology, batch_ref)?;
                nncore::sgd_step_in_place(&mut theta, &grads, hp.inner_lr, mask)?;
            }
        }
        InnerSampling::Online => {
            predictions.reserve(task.len());
            let mut buffer: Vec<Example> = Vec::with_capacity(hp.inner_batch);
            for (i, ex) in task.examples.iter().enumerate() {
                let probability = predict_ctr(&theta, topology, ex)?;
                predictions.push(Prediction {
                    probability,
                    label: ex.label,
                });
                buffer.push(ex.clone());
                if buffer.len() == hp.inner_batch || i + 1 == task.len() {
                    for _ in 0..hp.inner_iters {
                        let grads = nncore::backward(&theta, topology, &buffer)?;
                        nncore::sgd_step_in_place(&mut theta, &grads, hp.inner_lr, mask)?;
                    }
                    buffer.clear();
                }
            }
        }
    }
    Ok(AdaptResult {
        theta_tilde: theta,
        predictions,
    })
}

/// Reptile meta-gradient `(θ̃ - θ⁰) / ε`.
///
/// This points from θ⁰ toward the adapted parameters; [`outer_update`] moves
/// θ⁰ along it.
pub fn meta_gradient(theta0: &ParameterSet, theta_tilde: &ParameterSet, epsilon: f64) -> Result<GradientSet> {
    theta0.check_congruent(theta_tilde, "meta_gradient")?;
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut out = theta0.clone();
    for (o, t) in out.segments_mut().iter_mut().zip(theta_tilde.segments()) {
        for (v, &tv) in o.values.iter_mut().zip(&t.values) {
            *v = (tv - *v) / epsilon;
        }
    }
    Ok(GradientSet::from_params(out))
}

/// `θ⁰ - β (θ⁰ - mean(adapted))` on adaptive segments; fixed segments are copied.
///
/// β = 0, β = 1 and "every adapted copy equals θ⁰" are reproduced exactly.
pub fn outer_update(
    theta0: &ParameterSet,
    adapted: &[ParameterSet],
    beta: f64,
    mask: &PartitionMask,
) -> Result<ParameterSet> {
    if adapted.is_empty() {
        return Err(Error::contract("outer_update needs at least one adapted parameter set"));
    }
    for a in adapted {
        theta0.check_congruent(a, "outer_update")?;
    }
    mask.check(theta0)?;
    if !beta.is_finite() {
        return Err(Error::contract(format!("outer learning rate must be finite, got {beta}")));
    }
    let mut out = theta0.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    let n = adapted.len() as f64;
    for (s, seg) in out.segments_mut().iter_mut().enumerate() {
        if !mask.is_adaptive(s) {
            continue;
        }
        for (j, v) in seg.values.iter_mut().enumerate() {
            let first = adapted[0].segments()[s].values[j];
            let mut sum = 0.0;
            let mut all_equal = true;
            for a in adapted {
                let x = a.segments()[s].values[j];
                all_equal &= x == first;
                sum += x;
            }
            let mean = if all_equal { first } else { sum / n };
            if beta == 1.0 {
                *v = mean;
            } else if mean != *v {
                *v -= beta * (*v - mean);
            }
        }
    }
    Ok(out)
}

/// Linear schedule `start + (end - start) * step / (total - 1)`; `start` when total is 1.
pub fn linear_anneal(step: usize, total: usize, start: f64, end: f64) -> Result<f64> {
    if step >= total {
        return Err(Error::contract(format!("step {step} outside schedule of length {total}")));
    }
    if total == 1 {
        return Ok(start);
    }
    Ok(start + (end - start) * step as f64 / (total - 1) as f64)
}

/// Offline outer learning rate at `step` of `hp.outer_iters`.
pub fn anneal_outer_lr(step: usize, hp: &Hyperparams) -> Result<f64> {
    linear_anneal(step, hp.outer_iters, hp.outer_lr_start, hp.outer_lr_end)
}

/// Result of offline meta training.
#[derive(Debug, Clone)]
pub struct OfflineRun {
    pub state: MetaState,
    /// Mean loss of θ⁰ on the sampled tasks before each outer step.
    pub loss_trace: Vec<f64>,
}

/// Offline Reptile over source users, all parameters adaptive.
pub fn offline_meta_train(
    source_tasks: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
    seed: u64,
) -> Result<OfflineRun> {
    hp.validate()?;
    if source_tasks.is_empty() {
        return Err(Error::contract("offline meta training needs at least one source task"));
    }
    let mask = PartitionMask::all_adaptive(topology);
    let mut theta0 = nncore::init_params(topology, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, SALT_OFFLINE));
    let n = hp.outer_batch.min(source_tasks.len());
    let mut loss_trace = Vec::with_capacity(hp.outer_iters);
    let mut adapted = Vec::with_capacity(n);

    for step in 0..hp.outer_iters {
        let picks = index::sample(&mut rng, source_tasks.len(), n);
        adapted.clear();
        let mut loss_sum = 0.0;
        for t in picks.iter() {
            let task = &source_tasks[t];
            loss_sum += nncore::batch_loss(&theta0, topology, &task.examples)?;
            let inner_seed = rng.next_u64();
            let res = inner_adapt(&theta0, task, hp, &mask, topology, InnerSampling::Offline { seed: inner_seed })?;
            adapted.push(res.theta_tilde);
        }
        loss_trace.push(loss_sum / n as f64);
        let beta = anneal_outer_lr(step, hp)?;
        theta0 = outer_update(&theta0, &adapted, beta, &mask)?;
    }
    debug_assert!(theta0.all_finite());
    Ok(OfflineRun {
        state: MetaState {
            theta0,
            outer_step: hp.outer_iters,
            rng_seed: seed,
        },
        loss_trace,
    })
}

fn append_predictions(log: &mut EvalLog, task: &TaskDataset, predictions: &[Prediction]) {
    let session_len = task.len();
    for (i, p) in predictions.iter().enumerate() {
        log.push(LogEntry {
            score: p.probability,
            label: p.label,
            user_id: task.user_id,
            position: log.len(),
            user_position: i,
            session_len,
        });
    }
}

/// Online meta training over the target stream. Returns the updated meta
/// state and the prequential log.
pub fn online_meta_train(
    meta: &MetaState,
    target_stream: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
    partition: &PartitionSpec,
) -> Result<(MetaState, EvalLog)> {
    online_meta_train_with(meta, target_stream, hp, topology, partition, |_, _| {})
}

/// [`online_meta_train`] with a hook that sees every user's adapted parameters.
pub fn online_meta_train_with<F>(
    meta: &MetaState,
    target_stream: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
    partition: &PartitionSpec,
    mut on_user: F,
) -> Result<(MetaState, EvalLog)>
where
    F: FnMut(&TaskDataset, &ParameterSet),
{
    hp.validate()?;
    if target_stream.is_empty() {
        return Err(Error::contract("online meta training needs a non-empty stream"));
    }
    if !meta.theta0.matches_topology(topology) {
        return Err(Error::contract("meta parameters do not match the topology"));
    }
    let mask = partition_mask(topology, partition)?;
    let total_updates = target_stream.len().div_ceil(hp.outer_batch);
    let mut theta0 = meta.theta0.clone();
    let mut log = EvalLog::default();
    let mut adapted = Vec::with_capacity(hp.outer_batch);

    for (u, chunk) in target_stream.chunks(hp.outer_batch).enumerate() {
        adapted.clear();
        for task in chunk {
            let res = inner_adapt(&theta0, task, hp, &mask, topology, InnerSampling::Online)?;
            append_predictions(&mut log, task, &res.predictions);
            on_user(task, &res.theta_tilde);
            adapted.push(res.theta_tilde);
        }
        let beta = linear_anneal(u, total_updates, hp.online_outer_lr_start, hp.online_outer_lr_end)?;
        theta0 = outer_update(&theta0, &adapted, beta, &mask)?;
    }
    Ok((
        MetaState {
            theta0,
            outer_step: meta.outer_step + total_updates,
            rng_seed: meta.rng_seed,
        },
        log,
    ))
}

/// Per-user finetuning of every parameter from a shared start point, without
/// any outer update. Shared by `base+finetune` and `meta`.
pub fn finetune_stream(
    start: &ParameterSet,
    target_stream: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
) -> Result<EvalLog> {
    hp.validate()?;
    let mask = PartitionMask::all_adaptive(topology);
    let mut log = EvalLog::default();
    for task in target_stream {
        let res = inner_adapt(start, task, hp, &mask, topology, InnerSampling::Online)?;
        append_predictions(&mut log, task, &res.predictions);
    }
    Ok(log)
}

/// Predictions of a frozen model. `skip` gives, per task, how many leading
/// items to leave out of the log.
pub fn predict_stream(
    params: &ParameterSet,
    target_stream: &[TaskDataset],
    topology: &NetworkTopology,
    skip: impl Fn(&TaskDataset) -> usize,
) -> Result<EvalLog> {
    let mut log = EvalLog::default();
    for task in target_stream {
        let from = skip(task).min(task.len());
        let probs = nncore::forward(params, topology, &task.examples)?;
        for (i, (&score, ex)) in probs.iter().zip(&task.examples).enumerate().skip(from) {
            log.push(LogEntry {
                score,
                label: ex.label,
                user_id: task.user_id,
                position: log.len(),
                user_position: i,
                session_len: task.len(),
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct BaseRun {
    pub params: ParameterSet,
    /// Batch loss before each SGD step.
    pub loss_trace: Vec<f64>,
}

/// Unified model: plain mini-batch SGD over pooled records, reshuffled every epoch.
pub fn train_base(records: &[Example], hp: &Hyperparams, topology: &NetworkTopology, seed: u64) -> Result<BaseRun> {
    hp.validate()?;
    let mut params = nncore::init_params(topology, seed);
    let mask = PartitionMask::all_adaptive(topology);
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, SALT_BASE));
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut loss_trace = Vec::new();
    let mut batch = Vec::with_capacity(hp.base_batch);
    for _ in 0..hp.base_epochs {
        // Fisher-Yates with our own rng keeps the order platform independent
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(hp.base_batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| records[i].clone()));
            let probs = nncore::forward(&params, topology, &batch)?;
            let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
            loss_trace.push(nncore::loss(&probs, &labels)?);
            let grads = nncore::backward(&params, topology, &batch)?;
            nncore::sgd_step_in_place(&mut params, &grads, hp.base_lr, &mask)?;
        }
    }
    Ok(BaseRun { params, loss_trace })
}

/// `base+finetune`: per-user all-parameter finetuning from the base model.
pub fn base_plus_finetune(
    base_params: &ParameterSet,
    target_stream: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
) -> Result<EvalLog> {
    finetune_stream(base_params, target_stream, hp, topology)
}

/// `meta`: offline meta training, then per-user finetuning of all parameters
/// with no online outer update.
pub fn meta_all_params(
    source_tasks: &[TaskDataset],
    target_stream: &[TaskDataset],
    hp: &Hyperparams,
    topology: &NetworkTopology,
    seed: u64,
) -> Result<EvalLog> {
    let offline = offline_meta_train(source_tasks, hp, topology, seed)?;
    finetune_stream(&offline.state.theta0, target_stream, hp, topology)
}
