//! Predictive experience replay.
//!
//! Between tasks only a small buffer of action sequences survives. When task
//! `k` starts, frozen copies of the world model and the first-frame
//! generator synthesize rehearsal sequences for every earlier task, which are
//! mixed with the real task-`k` data.

use std::collections::BTreeMap;

use cpl_tensor::{Adam, Gradients, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_without_replacement, Batch, DatasetSplit, VideoSequence};
use crate::error::{check_label, CplError, Result};
use crate::gaussian::standard_normal;
use crate::generator::FrameGenerator;
use crate::metrics::{evaluate_task, EvalMatrix, EvalOptions, KPolicy, TaskScore};
use crate::world_model::{LatentNoise, RolloutMode, WorldModel};

/// `ceil(x)` that ignores floating-point dust above an integer, so that
/// `0.07 * 100` counts as 7.
pub fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub iterations: usize,
    /// Generator steps per task; when absent, `generator_fraction * iterations`.
    pub generator_iterations: Option<usize>,
    pub generator_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub replay_volume_ratio: f64,
    pub action_fraction: f64,
    /// Re-synthesize the replayed part of every batch from the frozen
    /// snapshots instead of using one replay set per task boundary.
    pub regenerate_replay: bool,
    /// When set, each world-model step teacher-forces a context length drawn
    /// uniformly from this value up to the configured context, so the model
    /// also learns to roll out from short contexts.
    pub min_train_context: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainSchedule {
    pub fn full_scale() -> Self {
        Self {
            iterations: 30_000,
            generator_iterations: None,
            generator_fraction: 0.1,
            batch_size: 32,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 1e-4,
            beta: 1e-4,
            replay_volume_ratio: 1.0 / 3.0,
            action_fraction: 0.07,
            regenerate_replay: false,
            min_train_context: None,
            clip_norm: None,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            iterations: 2_000,
            batch_size: 16,
            ..Self::full_scale()
        }
    }

    pub fn generator_steps(&self) -> usize {
        self.generator_iterations
            .unwrap_or_else(|| (self.iterations as f64 * self.generator_fraction).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CplError::Config(format!("schedule: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr must be positive and Adam decays in [0, 1)");
        }
        if !(self.generator_fraction >= 0.0) {
            return bad("generator_fraction must be non-negative");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("KL weights must be non-negative");
        }
        if !(self.replay_volume_ratio > 0.0 && self.replay_volume_ratio <= 1.0) {
            return bad("replay_volume_ratio must lie in (0, 1]");
        }
        if !(self.action_fraction > 0.0 && self.action_fraction <= 1.0) {
            return bad("action_fraction must lie in (0, 1]");
        }
        if self.min_train_context == Some(0) {
            return bad("min_train_context must be at least 1");
        }
        Ok(())
    }

    fn adam<T: Scalar>(&self, store: &cpl_tensor::ParamStore<T>) -> Adam<T> {
        let mut a = Adam::new(store, T::lit(self.lr), T::lit(self.beta1), T::lit(self.beta2));
        a.clip_norm = self.clip_norm.map(T::lit);
        a
    }
}

/// What survives of a finished task: action sequences, or only sequence
/// lengths for action-free data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum BufferEntry<T> {
    Actions(Vec<Tensor<T>>),
    Lengths(Vec<usize>),
}

impl<T> BufferEntry<T> {
    pub fn count(&self) -> usize {
        match self {
            Self::Actions(a) => a.len(),
            Self::Lengths(l) => l.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferAudit {
    pub action_sequences: usize,
    pub action_bytes: usize,
    pub length_entries: usize,
    /// Frames held for rehearsal; the buffer type has no place for any.
    pub frame_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActionBuffer<T> {
    fraction: f64,
    entries: BTreeMap<usize, BufferEntry<T>>,
}

impl<T: Scalar> ActionBuffer<T> {
    pub fn new(fraction: f64) -> Self {
        Self {
            fraction,
            entries: BTreeMap::new(),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// Keeps `ceil(fraction * n)` sequences of `split`, sampled uniformly
    /// without replacement.
    pub fn store_actions(&mut self, task: usize, split: &DatasetSplit<T>, rng: &mut impl Rng) -> Result<()> {
        if split.task_id() != task {
            return Err(CplError::Config(format!(
                "split of task {} stored under task {task}",
                split.task_id()
            )));
        }
        let n = split.len();
        let keep = ceil_count(self.fraction * n as f64).min(n);
        let idx = sample_without_replacement(rng, n, keep);
        let seqs = split.sequences();
        let entry = if seqs.first().is_some_and(|s| s.actions().is_some()) {
            BufferEntry::Actions(idx.iter().map(|&i| seqs[i].actions().unwrap().clone()).collect())
        } else {
            BufferEntry::Lengths(idx.iter().map(|&i| seqs[i].len()).collect())
        };
        self.entries.insert(task, entry);
        Ok(())
    }

    pub fn get(&self, task: usize) -> Option<&BufferEntry<T>> {
        self.entries.get(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn audit(&self) -> BufferAudit {
        let mut a = BufferAudit::default();
        for e in self.entries.values() {
            match e {
                BufferEntry::Actions(v) => {
                    a.action_sequences += v.len();
                    a.action_bytes += v.iter().map(|t| t.len() * std::mem::size_of::<T>()).sum::<usize>();
                }
                BufferEntry::Lengths(l) => a.length_entries += l.len(),
            }
        }
        a
    }
}

/// Synthesized rehearsal sequences of one earlier task.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayDataset<T> {
    pub sequences: Vec<VideoSequence<T>>,
    pub task_id: usize,
    /// Fingerprint of the snapshots that produced the data.
    pub snapshot_version: u64,
}

/// Label the world model sees for data of `task`.
pub fn model_label(task: usize, conditioned: bool) -> usize {
    if conditioned {
        task
    } else {
        1
    }
}

pub fn snapshot_version<T: Scalar>(m: &WorldModel<T>, g: &FrameGenerator<T>) -> u64 {
    m.params().fingerprint().rotate_left(17) ^ g.params().fingerprint()
}

const SYNTH_CHUNK: usize = 32;

/// Draws `count` rehearsal sequences of task `task` from frozen snapshots:
/// an action sequence (or length) from the buffer, a first frame from `g`,
/// and a prior rollout of `m` for the remaining steps. Runs on
/// inference-only graphs, so the output has no gradient linkage.
pub fn synthesize_replay<T: Scalar>(
    m: &WorldModel<T>,
    g: &FrameGenerator<T>,
    buffer: &ActionBuffer<T>,
    task: usize,
    count: usize,
    conditioned: bool,
    rng: &mut impl Rng,
) -> Result<ReplayDataset<T>> {
    check_label(task, g.config().num_tasks)?;
    let entry = buffer.get(task).filter(|e| e.count() > 0).ok_or(CplError::EmptyBuffer { task })?;
    let label = model_label(task, conditioned);
    let mut sequences = Vec::with_capacity(count);
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(SYNTH_CHUNK);
        remaining -= n;
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..entry.count())).collect();
        let (len, actions): (usize, Option<Vec<Tensor<T>>>) = match entry {
            BufferEntry::Lengths(l) => {
                let len = l[picks[0]];
                if picks.iter().any(|&p| l[p] != len) {
                    return Err(CplError::Shape("buffered sequence lengths differ".into()));
                }
                (len, None)
            }
            BufferEntry::Actions(a) => {
                let steps = a[picks[0]].shape()[0];
                let d = a[picks[0]].shape()[1];
                let per_step = (0..steps)
                    .map(|t| {
                        let mut v = Vec::with_capacity(n * d);
                        for &p in &picks {
                            v.extend_from_slice(&a[p].data()[t * d..(t + 1) * d]);
                        }
                        Tensor::new(&[n, d], v)
                    })
                    .collect();
                (steps + 1, Some(per_step))
            }
        };
        if len < 2 {
            return Err(CplError::Shape("replay sequences need at least 2 frames".into()));
        }
        let first = g.generate_initial_frame(actions.as_ref().map(|a| &a[0]), &vec![task; n], rng)?;
        let batch = Batch {
            frames: vec![first.clone()],
            actions: actions.clone(),
            labels: vec![label; n],
        };
        let noise = LatentNoise::sample(n, len - 1, m.config().latent_dim, rng);
        let preds = m.rollout_with_noise(&batch, 1, len - 1, RolloutMode::TestPrior, &noise)?;
        let mut steps = Vec::with_capacity(len);
        steps.push(first);
        steps.extend(preds);
        for i in 0..n {
            let frames: Vec<Tensor<T>> = steps.iter().map(|s| s.item(i)).collect();
            let acts = actions.as_ref().map(|a| {
                let rows: Vec<Tensor<T>> = a.iter().map(|t| t.item(i)).collect();
                Tensor::stack(&rows)
            });
            sequences.push(VideoSequence::new(Tensor::stack(&frames), acts, task)?);
        }
    }
    Ok(ReplayDataset {
        sequences,
        task_id: task,
        snapshot_version: snapshot_version(m, g),
    })
}

/// Splits `ceil(ratio * n_current)` replay sequences over tasks
/// `1..current`; earlier tasks take the remainder.
pub fn replay_volumes(current: usize, n_current: usize, ratio: f64) -> Vec<(usize, usize)> {
    if current <= 1 {
        return Vec::new();
    }
    let prev = current - 1;
    let total = ceil_count(ratio * n_current as f64);
    (1..=prev)
        .map(|k| (k, total / prev + usize::from(k <= total % prev)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Model,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub task: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

pub const LOG_HEADER: &str = "iteration,task,loss,recon,kl";

pub fn logs_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{:.8},{:.8},{:.8}\n", r.iteration, r.task, r.loss, r.recon, r.kl));
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLogs {
    pub model: Vec<LogRow>,
    pub generator: Vec<LogRow>,
    /// Replay sequences synthesized per earlier task.
    pub replay: Vec<(usize, usize)>,
    pub snapshot_version: Option<u64>,
}

/// How a task period is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainContext {
    pub context_len: usize,
    /// Feed each sequence its own task label (otherwise label 1 throughout).
    pub conditioned: bool,
    /// Rehearse earlier tasks with the generator.
    pub replay: bool,
}

fn finite_grads<T: Scalar>(g: &Gradients<T>) -> bool {
    g.iter().all(|(_, t)| t.all_finite())
}

fn diverged(task: usize, iteration: usize, err: CplError) -> CplError {
    match err {
        CplError::Numerical { term } => CplError::Diverged { task, iteration, term },
        e => e,
    }
}

fn set_kl_weights<T: Scalar>(m: &mut WorldModel<T>, g: Option<&mut FrameGenerator<T>>, s: &TrainSchedule) {
    m.set_alpha(s.alpha);
    if let Some(g) = g {
        g.set_beta(s.beta);
    }
}

/// World-model steps over batches drawn uniformly from `pool`. Parameters
/// are only updated after the loss and gradients are checked finite.
#[allow(clippy::too_many_arguments)]
fn train_model_steps<T: Scalar>(
    m: &mut WorldModel<T>,
    pool: &[&VideoSequence<T>],
    task: usize,
    schedule: &TrainSchedule,
    ctx: &TrainContext,
    iterations: usize,
    mut refresh: impl FnMut(&mut Vec<VideoSequence<T>>, &[&VideoSequence<T>], &mut ChaCha8Rng) -> Result<()>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LogRow>> {
    let mut opt = schedule.adam(m.params());
    let mut logs = Vec::with_capacity(iterations);
    let mut fresh = Vec::new();
    for it in 0..iterations {
        let picks = sample_sequences_ref(pool, schedule.batch_size, rng)?;
        fresh.clear();
        refresh(&mut fresh, &picks, rng)?;
        let seqs: Vec<&VideoSequence<T>> = if fresh.is_empty() { picks } else { fresh.iter().collect() };
        let mut batch = Batch::from_sequences(&seqs)?;
        batch.labels = seqs.iter().map(|s| model_label(s.task_id(), ctx.conditioned)).collect();
        let context_len = match schedule.min_train_context {
            Some(lo) if lo < ctx.context_len => rng.gen_range(lo..=ctx.context_len),
            _ => ctx.context_len,
        };
        let noise = LatentNoise::sample(batch.len(), batch.seq_len() - 1, m.config().latent_dim, rng);
        let (rep, g, loss) = m
            .elbo_with_noise(&batch, context_len, &noise, true)
            .map_err(|e| diverged(task, it, e))?;
        if !rep.loss.is_finite() {
            return Err(CplError::Diverged {
                task,
                iteration: it,
                term: "loss".into(),
            });
        }
        let grads = g.backward(loss).into_params();
        drop(g);
        if !finite_grads(&grads) {
            return Err(CplError::Diverged {
                task,
                iteration: it,
                term: "gradient".into(),
            });
        }
        opt.step(m.params_mut(), &grads);
        logs.push(LogRow {
            iteration: it,
            task,
            loss: rep.loss.as_f64(),
            recon: rep.recon.as_f64(),
            kl: rep.kl.as_f64(),
        });
    }
    Ok(logs)
}

fn sample_sequences_ref<'a, T: Scalar>(
    pool: &[&'a VideoSequence<T>],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a VideoSequence<T>>> {
    if pool.is_empty() {
        return Err(CplError::EmptySplit);
    }
    Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
}

/// Generator steps on first frames of `pool`, one loss block per label.
fn train_generator_steps<T: Scalar>(
    g: &mut FrameGenerator<T>,
    pool: &[&VideoSequence<T>],
    task: usize,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LogRow>> {
    let iterations = schedule.generator_steps();
    let mut opt = schedule.adam(g.params());
    let mut logs = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let seqs = sample_sequences_ref(pool, schedule.batch_size, rng)?;
        let firsts: Vec<Tensor<T>> = seqs.iter().map(|s| s.frame(0)).collect();
        let frames = Tensor::stack(&firsts);
        let actions = seqs[0].actions().map(|_| {
            let rows: Vec<Tensor<T>> = seqs.iter().map(|s| s.actions().unwrap().item(0)).collect();
            Tensor::stack(&rows)
        });
        let labels: Vec<usize> = seqs.iter().map(|s| s.task_id()).collect();
        let eps = standard_normal(&[labels.len(), g.config().latent_dim], rng);
        let (rep, graph, loss) = g
            .loss_with_noise(&frames, actions.as_ref(), &labels, &eps, true)
            .map_err(|e| diverged(task, it, e))?;
        let grads = graph.backward(loss).into_params();
        drop(graph);
        if !rep.loss.is_finite() || !finite_grads(&grads) {
            return Err(CplError::Diverged {
                task,
                iteration: it,
                term: "generator".into(),
            });
        }
        opt.step(g.params_mut(), &grads);
        logs.push(LogRow {
            iteration: it,
            task,
            loss: rep.loss.as_f64(),
            recon: rep.recon.as_f64(),
            kl: rep.kl.as_f64(),
        });
    }
    Ok(logs)
}

/// First period: the world model on task 1 alone, then the generator on its
/// first frames.
pub fn train_first_task<T: Scalar>(
    m: &mut WorldModel<T>,
    g: Option<&mut FrameGenerator<T>>,
    split: &DatasetSplit<T>,
    schedule: &TrainSchedule,
    ctx: &TrainContext,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLogs> {
    train_task(m, g, split, &ActionBuffer::new(schedule.action_fraction), schedule, ctx, rng)
}

/// One task period. With replay enabled and `k > 1`, frozen snapshots of
/// both models synthesize rehearsal data for every earlier task before any
/// parameter moves; the world model then trains on the mixed pool and the
/// generator on real plus replayed first frames.
pub fn train_task<T: Scalar>(
    m: &mut WorldModel<T>,
    mut g: Option<&mut FrameGenerator<T>>,
    split: &DatasetSplit<T>,
    buffer: &ActionBuffer<T>,
    schedule: &TrainSchedule,
    ctx: &TrainContext,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLogs> {
    schedule.validate()?;
    if split.is_empty() {
        return Err(CplError::EmptySplit);
    }
    let k = split.task_id();
    set_kl_weights(m, g.as_deref_mut(), schedule);
    let mut logs = TaskLogs::default();
    let replaying = ctx.replay && k > 1;

    let snapshot = match (&g, replaying) {
        (Some(gen), true) => Some((m.clone(), (*gen).clone())),
        (None, true) => return Err(CplError::Config("replay needs a frame generator".into())),
        _ => None,
    };
    let mut replay_sets = Vec::new();
    if let Some((ms, gs)) = &snapshot {
        for (prev, count) in replay_volumes(k, split.len(), schedule.replay_volume_ratio) {
            let set = synthesize_replay(ms, gs, buffer, prev, count, ctx.conditioned, rng)?;
            logs.replay.push((prev, set.sequences.len()));
            logs.snapshot_version = Some(set.snapshot_version);
            replay_sets.push(set);
        }
    }
    let mut pool: Vec<&VideoSequence<T>> = split.sequences().iter().collect();
    for set in &replay_sets {
        pool.extend(set.sequences.iter());
    }

    let refresh = |out: &mut Vec<VideoSequence<T>>, picks: &[&VideoSequence<T>], r: &mut ChaCha8Rng| -> Result<()> {
        let Some((ms, gs)) = snapshot.as_ref().filter(|_| schedule.regenerate_replay) else {
            return Ok(());
        };
        let mut need: BTreeMap<usize, usize> = BTreeMap::new();
        for p in picks.iter().filter(|p| p.task_id() != k) {
            *need.entry(p.task_id()).or_default() += 1;
        }
        out.extend(picks.iter().filter(|p| p.task_id() == k).map(|p| (*p).clone()));
        for (task, n) in need {
            out.extend(synthesize_replay(ms, gs, buffer, task, n, ctx.conditioned, r)?.sequences);
        }
        Ok(())
    };
    logs.model = train_model_steps(m, &pool, k, schedule, ctx, schedule.iterations, refresh, rng)?;

    if let Some(gen) = g {
        let first_pool: Vec<&VideoSequence<T>> = pool.clone();
        logs.generator = train_generator_steps(gen, &first_pool, k, schedule, rng)?;
    }
    Ok(logs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    CplFull,
    SequentialBase,
    Joint,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CplFull => "cpl_full",
            Self::SequentialBase => "sequential_base",
            Self::Joint => "joint",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = CplError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpl_full" => Ok(Self::CplFull),
            "sequential_base" => Ok(Self::SequentialBase),
            "joint" => Ok(Self::Joint),
            o => Err(CplError::Config(format!("unknown mode {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub policy: KPolicy,
    pub adapt: bool,
    pub adapt_steps: usize,
    /// Evaluate at most this many test sequences per task.
    pub max_sequences: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            policy: KPolicy::Infer,
            adapt: false,
            adapt_steps: 5,
            max_sequences: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: TrainMode,
    pub replay: bool,
    pub conditioned: bool,
    pub context_len: usize,
    pub horizon: usize,
    pub seed: u64,
    pub eval: EvalSpec,
}

impl RunOptions {
    /// Protocol of each mode: the full method replays and conditions on the
    /// task label; both baselines train one shared label without replay.
    pub fn for_mode(mode: TrainMode, context_len: usize, horizon: usize, seed: u64) -> Self {
        let full = mode == TrainMode::CplFull;
        Self {
            mode,
            replay: full,
            conditioned: full,
            context_len,
            horizon,
            seed,
            eval: EvalSpec::default(),
        }
    }
}

/// Seed of the rng stream for training period `period` (1-based); a resumed
/// run reproduces it exactly.
pub fn period_seed(seed: u64, period: usize) -> u64 {
    let mut z = seed ^ (period as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct TaskData<T> {
    pub train: DatasetSplit<T>,
    pub test: DatasetSplit<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodReport {
    pub period: usize,
    pub logs: TaskLogs,
    pub scores: Vec<TaskScore>,
}

/// Everything a run carries from one period to the next. Rehearsal data is
/// not part of it: only the action buffer persists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunState<T> {
    pub options: RunOptions,
    pub schedule: TrainSchedule,
    pub model: WorldModel<T>,
    pub generator: Option<FrameGenerator<T>>,
    pub buffer: ActionBuffer<T>,
    pub matrix: EvalMatrix,
    pub periods_done: usize,
}

impl<T: Scalar> RunState<T> {
    pub fn new(
        options: RunOptions,
        schedule: TrainSchedule,
        model: WorldModel<T>,
        generator: Option<FrameGenerator<T>>,
    ) -> Result<Self> {
        schedule.validate()?;
        if options.replay && generator.is_none() {
            return Err(CplError::Config("replay needs a frame generator".into()));
        }
        let k = model.num_tasks();
        Ok(Self {
            buffer: ActionBuffer::new(schedule.action_fraction),
            matrix: EvalMatrix::new(k),
            options,
            schedule,
            model,
            generator,
            periods_done: 0,
        })
    }

    pub fn total_periods(&self, num_tasks: usize) -> usize {
        if self.options.mode == TrainMode::Joint {
            1
        } else {
            num_tasks
        }
    }

    pub fn is_finished(&self, num_tasks: usize) -> bool {
        self.periods_done >= self.total_periods(num_tasks)
    }

    /// Bytes retained for rehearsal between periods.
    pub fn rehearsal_audit(&self) -> BufferAudit {
        self.buffer.audit()
    }

    fn check_tasks(&self, tasks: &[TaskData<T>]) -> Result<()> {
        if tasks.len() != self.model.num_tasks() {
            return Err(CplError::Config(format!(
                "{} tasks for a model built for {}",
                tasks.len(),
                self.model.num_tasks()
            )));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.train.task_id() != i + 1 || t.test.task_id() != i + 1 {
                return Err(CplError::Config(format!("task {} is out of order", i + 1)));
            }
        }
        Ok(())
    }

    /// Trains the next period and appends its evaluation row.
    pub fn run_period(&mut self, tasks: &[TaskData<T>]) -> Result<PeriodReport> {
        self.check_tasks(tasks)?;
        if self.is_finished(tasks.len()) {
            return Err(CplError::Config("run already finished".into()));
        }
        let period = self.periods_done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(period_seed(self.options.seed, period));
        let ctx = TrainContext {
            context_len: self.options.context_len,
            conditioned: self.options.conditioned,
            replay: self.options.replay,
        };
        let logs = if self.options.mode == TrainMode::Joint {
            let mut all = Vec::new();
            for t in tasks {
                all.extend(t.train.sequences().iter().cloned());
            }
            let schedule = TrainSchedule {
                iterations: self.schedule.iterations * tasks.len(),
                ..self.schedule.clone()
            };
            set_kl_weights(&mut self.model, None, &schedule);
            let pool: Vec<&VideoSequence<T>> = all.iter().collect();
            let model = train_model_steps(
                &mut self.model,
                &pool,
                0,
                &schedule,
                &ctx,
                schedule.iterations,
                |_, _, _| Ok(()),
                &mut rng,
            )?;
            TaskLogs {
                model,
                ..Default::default()
            }
        } else {
            let split = &tasks[period - 1].train;
            let g = if self.options.replay { self.generator.as_mut() } else { None };
            let logs = train_task(&mut self.model, g, split, &self.buffer, &self.schedule, &ctx, &mut rng)?;
            if self.options.replay {
                self.buffer.store_actions(period, split, &mut rng)?;
            }
            logs
        };
        let scores = self.evaluate(tasks, period, &mut rng)?;
        self.matrix.push_row(scores.iter().map(TaskScore::entry).collect())?;
        self.periods_done = period;
        Ok(PeriodReport { period, logs, scores })
    }

    /// Scores every task's test split with the current model.
    pub fn evaluate(&self, tasks: &[TaskData<T>], period: usize, rng: &mut impl Rng) -> Result<Vec<TaskScore>> {
        let seen = if self.options.mode == TrainMode::Joint { tasks.len() } else { period };
        let spec = &self.options.eval;
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let opts = EvalOptions {
                    policy: spec.policy,
                    adapt: spec.adapt,
                    adapt_steps: spec.adapt_steps,
                    adapt_lr: self.schedule.lr,
                    candidates: if self.options.conditioned { seen } else { 1 },
                    true_label: model_label(i + 1, self.options.conditioned),
                    context_len: self.options.context_len,
                    horizon: self.options.horizon,
                };
                let test = limit_split(&t.test, spec.max_sequences)?;
                evaluate_task(&self.model, &test, &opts, rng)
            })
            .collect()
    }
}

fn limit_split<T: Scalar>(split: &DatasetSplit<T>, max: Option<usize>) -> Result<DatasetSplit<T>> {
    match max {
        Some(n) if n < split.len() => DatasetSplit::new(split.sequences()[..n].to_vec(), split.task_id(), split.role()),
        _ => Ok(split.clone()),
    }
}

/// Final state of a completed run.
pub struct RunOutput<T> {
    pub state: RunState<T>,
    pub reports: Vec<PeriodReport>,
}

/// Runs every remaining period of `state`, calling `on_period` after each
/// (for checkpoints and logs).
pub fn run_sequence<T: Scalar>(
    mut state: RunState<T>,
    tasks: &[TaskData<T>],
    mut on_period: impl FnMut(&RunState<T>, &PeriodReport) -> Result<()>,
) -> Result<RunOutput<T>> {
    let mut reports = Vec::new();
    while !state.is_finished(tasks.len()) {
        let rep = state.run_period(tasks)?;
        on_period(&state, &rep)?;
        reports.push(rep);
    }
    Ok(RunOutput { state, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitRole;

    fn seq(task: usize, len: usize, actions: bool) -> VideoSequence<f32> {
        let frames = Tensor::full(&[len, 1, 8, 8], 0.25);
        let acts = actions.then(|| Tensor::from_fn(&[len - 1, 2], |i| i as f32));
        VideoSequence::new(frames, acts, task).unwrap()
    }

    fn split(task: usize, n: usize, actions: bool) -> DatasetSplit<f32> {
        DatasetSplit::new((0..n).map(|_| seq(task, 15, actions)).collect(), task, SplitRole::Train).unwrap()
    }

    #[test]
    fn ceil_count_ignores_rounding_dust() {
        assert_eq!(ceil_count(0.07 * 100.0), 7);
        assert_eq!(ceil_count(300.0 / 3.0), 100);
        assert_eq!(ceil_count(0.07 * 101.0), 8);
        assert_eq!(ceil_count(0.0), 0);
    }

    #[test]
    fn buffer_keeps_seven_percent_of_actions() {
        let mut b = ActionBuffer::<f32>::new(0.07);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.store_actions(1, &split(1, 100, true), &mut rng).unwrap();
        assert_eq!(b.get(1).unwrap().count(), 7);
        let a = b.audit();
        assert_eq!(a.action_sequences, 7);
        assert_eq!(a.action_bytes, 7 * 14 * 2 * 4);
        assert_eq!(a.frame_bytes, 0);

        let mut all = ActionBuffer::<f32>::new(1.0);
        all.store_actions(2, &split(2, 10, true), &mut rng).unwrap();
        assert_eq!(all.get(2).unwrap().count(), 10);
        assert!(all.store_actions(3, &split(2, 10, true), &mut rng).is_err());
    }

    #[test]
    fn action_free_buffer_holds_only_lengths() {
        let mut b = ActionBuffer::<f32>::new(0.07);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.store_actions(1, &split(1, 100, false), &mut rng).unwrap();
        assert_eq!(b.get(1), Some(&BufferEntry::Lengths(vec![15; 7])));
        let a = b.audit();
        assert_eq!((a.action_bytes, a.action_sequences, a.length_entries), (0, 0, 7));
    }

    #[test]
    fn replay_volume_accounting() {
        assert!(replay_volumes(1, 300, 1.0 / 3.0).is_empty());
        assert_eq!(replay_volumes(2, 300, 1.0 / 3.0), vec![(1, 100)]);
        assert_eq!(replay_volumes(4, 300, 1.0 / 3.0), vec![(1, 34), (2, 33), (3, 33)]);
        let v = replay_volumes(3, 32, 1.0 / 3.0);
        assert_eq!(v.iter().map(|x| x.1).sum::<usize>(), 11);
    }

    #[test]
    fn schedule_profiles() {
        let p = TrainSchedule::full_scale();
        assert_eq!((p.iterations, p.batch_size, p.generator_steps()), (30_000, 32, 3_000));
        assert_eq!((p.beta1, p.beta2, p.lr), (0.9, 0.999, 5e-4));
        let d = TrainSchedule::desk_scale();
        assert_eq!((d.iterations, d.batch_size, d.lr), (2_000, 16, 5e-4));
        assert!(TrainSchedule { replay_volume_ratio: 0.0, ..d.clone() }.validate().is_err());
        assert!(TrainSchedule { min_train_context: Some(0), ..d.clone() }.validate().is_err());
        assert!(TrainSchedule { action_fraction: 1.5, ..d }.validate().is_err());
    }

    #[test]
    fn period_seeds_differ() {
        assert_ne!(period_seed(7, 1), period_seed(7, 2));
        assert_ne!(period_seed(7, 1), period_seed(8, 1));
        assert_eq!(period_seed(7, 3), period_seed(7, 3));
    }

    #[test]
    fn modes_parse() {
        for m in [TrainMode::CplFull, TrainMode::SequentialBase, TrainMode::Joint] {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("x".parse::<TrainMode>().is_err());
    }
}
