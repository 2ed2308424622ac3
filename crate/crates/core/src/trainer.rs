//! Task-stream orchestration: two-stage training, experience replay,
//! quadratic weight consolidation, parameter freezing, and per-task
//! evaluation over an ordered sequence of tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TaskData;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, mean_gold_action_probs, EvalResult};
use crate::grammar::{lf_to_actions, Action, ActionId, ActionRegistry, BoundGrammar};
use crate::nn::{
    adam_step, BatchExample, GradStore, ParamId, Parser, ParserConfig, Partition, TrainMask,
    WordVocab,
};
use crate::sampling::{
    sample_action_subset, sample_balance, sample_dlfs, sample_fss, sample_lfs, sample_random,
    ActionHistogram, Memory, SampleView, ACTION_SUBSET_THRESHOLD, DEFAULT_DLFS_ROUNDS,
};

/// Training regime for a task stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Plain sequential training on each task, nothing else.
    FineTune,
    /// Sequential training plus replay minibatches from stored memories.
    Emr,
    /// Sequential training plus the quadratic consolidation penalty.
    Ewc,
    /// Two-stage training with adapters, freezing, and replay.
    Tr,
    /// `Tr` plus the consolidation penalty.
    TrEwc,
    /// Joint training on all tasks at once; upper-bound reference.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::FineTune, Method::Emr, Method::Ewc, Method::Tr, Method::TrEwc, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::FineTune => "FINE_TUNE",
            Method::Emr => "EMR",
            Method::Ewc => "EWC",
            Method::Tr => "TR",
            Method::TrEwc => "TR_EWC",
            Method::Oracle => "ORACLE",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config { msg: format!("unknown method '{s}'") })
    }

    /// Fast stage plus per-task adapters plus freezing of earlier tasks'
    /// task-specific parameters.
    pub fn two_stage(self) -> bool {
        matches!(self, Method::Tr | Method::TrEwc)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Method::Emr | Method::Tr | Method::TrEwc)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Method::Ewc | Method::TrEwc)
    }

    /// Whether the method stores memories at all (for replay and/or the
    /// consolidation statistics).
    pub fn uses_memory(self) -> bool {
        self.uses_replay() || self.uses_ewc()
    }
}

/// Replay-memory selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    Random,
    Fss,
    Lfs,
    Dlfs,
    Balance,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Random,
        SamplerKind::Fss,
        SamplerKind::Lfs,
        SamplerKind::Dlfs,
        SamplerKind::Balance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Random => "RANDOM",
            SamplerKind::Fss => "FSS",
            SamplerKind::Lfs => "LFS",
            SamplerKind::Dlfs => "DLFS",
            SamplerKind::Balance => "BALANCE",
        }
    }

    pub fn parse(s: &str) -> Result<SamplerKind> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config { msg: format!("unknown sampler '{s}'") })
    }
}

/// Epoch counts, learning rate, and loss weights for one run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs_fast: usize,
    pub epochs_slow: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ewc_lambda: f64,
    pub replay_batches_per_epoch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_fast: 5,
            epochs_slow: 10,
            lr: 0.0025,
            batch_size: 16,
            ewc_lambda: 10.0,
            replay_batches_per_epoch: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { msg: msg.to_string() });
        if self.epochs_fast == 0 || self.epochs_slow == 0 {
            return bad("epoch counts must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.ewc_lambda >= 0.0) {
            return bad("consolidation weight must be nonnegative");
        }
        if self.replay_batches_per_epoch == 0 {
            return bad("replay batches per epoch must be positive");
        }
        Ok(())
    }
}

/// Everything about one task stream that is fixed before training starts:
/// the shared action registry, each task's bound grammar, per-action
/// parameter partitions, and the word vocabulary.
pub struct Stream {
    pub registry: ActionRegistry,
    pub bounds: Vec<BoundGrammar>,
    pub partitions: Vec<Partition>,
    pub vocab: WordVocab,
}

/// Builds the shared registry in stream order and decides each action's
/// partition: actions appearing in at least two task grammars are global,
/// the rest belong to the task that owns them.
pub fn prepare_stream(tasks: &[TaskData]) -> Result<Stream> {
    if tasks.is_empty() {
        return Err(Error::Config { msg: "empty task stream".to_string() });
    }
    let mut registry = ActionRegistry::new();
    let bounds: Vec<BoundGrammar> =
        tasks.iter().map(|t| registry.bind(t.grammar.clone())).collect();

    let mut owner: Vec<Option<usize>> = vec![None; registry.len()];
    let mut shared: Vec<bool> = vec![false; registry.len()];
    for (k, b) in bounds.iter().enumerate() {
        for &a in &b.inventory {
            match owner[a] {
                None => owner[a] = Some(k),
                Some(o) if o != k => shared[a] = true,
                _ => {}
            }
        }
    }
    let partitions: Vec<Partition> = (0..registry.len())
        .map(|a| {
            if shared[a] {
                Partition::Global
            } else {
                Partition::Task(owner[a].expect("every registered action has an owner"))
            }
        })
        .collect();

    let mut words: Vec<&str> = Vec::new();
    for t in tasks {
        for ex in &t.train {
            words.extend(ex.utterance.iter().map(String::as_str));
        }
    }
    let vocab = WordVocab::build(words);
    Ok(Stream { registry, bounds, partitions, vocab })
}

/// Mutable cross-task bookkeeping carried through a stream run.
#[derive(Debug, Clone, Default)]
pub struct ContinualState {
    /// One stored memory per completed task, in task order.
    pub memories: Vec<Memory>,
    /// Union of the action inventories of all completed tasks.
    pub seen_actions: BTreeSet<ActionId>,
    /// Parameter snapshot the consolidation penalty anchors to.
    pub anchor: Option<Vec<Vec<f64>>>,
    /// Per-coordinate curvature estimates, same shape as the snapshot.
    pub fisher: Option<Vec<Vec<f64>>>,
}

/// Actions of the current task that no earlier task's grammar contains.
pub fn unseen_actions(bound: &BoundGrammar, state: &ContinualState) -> BTreeSet<ActionId> {
    bound.inventory.difference(&state.seen_actions).copied().collect()
}

/// One task's training data in model-ready form.
pub struct TaskTensors {
    pub tokens: Vec<Vec<usize>>,
    pub actions: Vec<Vec<Action>>,
}

impl TaskTensors {
    pub fn prepare(task: &TaskData, bound: &BoundGrammar, vocab: &WordVocab) -> Result<Self> {
        let mut tokens = Vec::with_capacity(task.train.len());
        let mut actions = Vec::with_capacity(task.train.len());
        for ex in &task.train {
            tokens.push(vocab.ids(&ex.utterance));
            actions.push(lf_to_actions(&ex.lf, bound)?);
        }
        Ok(TaskTensors { tokens, actions })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Quadratic consolidation penalty `lambda * sum_j F_j (theta_j - anchor_j)^2`.
pub fn ewc_penalty(
    parser: &Parser,
    anchor: &[Vec<f64>],
    fisher: &[Vec<f64>],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for (t, tensor) in parser.params.tensors().iter().enumerate() {
        for (j, &w) in tensor.data.iter().enumerate() {
            let d = w - anchor[t][j];
            total += fisher[t][j] * d * d;
        }
    }
    lambda * total
}

/// Adds the penalty gradient `2 lambda F_j (theta_j - anchor_j)` to every
/// mask-allowed tensor.
fn add_ewc_grads(
    grads: &mut GradStore,
    parser: &Parser,
    anchor: &[Vec<f64>],
    fisher: &[Vec<f64>],
    lambda: f64,
    mask: &TrainMask,
) {
    for t in 0..parser.params.len() {
        if !mask.allows(ParamId(t)) {
            continue;
        }
        let tensor = parser.params.tensor(ParamId(t));
        let slot = grads.slot_mut(ParamId(t));
        for j in 0..tensor.data.len() {
            slot[j] += 2.0 * lambda * fisher[t][j] * (tensor.data[j] - anchor[t][j]);
        }
    }
}

/// First training stage: only the embeddings of `unseen` actions move.
/// Returns the final epoch's mean training loss, or `None` when there is
/// nothing to train.
pub fn fast_stage(
    parser: &mut Parser,
    data: &TaskTensors,
    bound: &BoundGrammar,
    task: usize,
    unseen: &BTreeSet<ActionId>,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    if unseen.is_empty() || data.is_empty() {
        return Ok(None);
    }
    let mask = parser.action_emb_mask(unseen);
    let mut last_epoch_mean = 0.0;
    for _ in 0..schedule.epochs_fast {
        let mut loss_sum = 0.0;
        for batch_idx in shuffled_batches(data.len(), schedule.batch_size, rng) {
            let batch: Vec<BatchExample> = batch_idx
                .iter()
                .map(|&i| BatchExample {
                    tokens: &data.tokens[i],
                    actions: &data.actions[i],
                    bound,
                    task,
                })
                .collect();
            let (loss, grads) = parser.gradient(&batch, &mask)?;
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut parser.params, &grads, &mut parser.opt, schedule.lr);
        }
        last_epoch_mean = loss_sum / data.len() as f64;
    }
    Ok(Some(last_epoch_mean))
}

/// Per-epoch loss decomposition of the slow stage.
#[derive(Debug, Clone)]
pub struct EpochLog {
    /// Instance-weighted mean loss over the epoch's current-task batches.
    pub current_mean: f64,
    /// Instance-weighted mean replay loss per stored memory.
    pub replay_means: Vec<f64>,
    /// Penalty value at the end of the epoch (0 when disabled).
    pub penalty: f64,
    /// `current_mean + sum(replay_means) + penalty`.
    pub total: f64,
}

/// Replay data for one stored memory, in model-ready form.
struct ReplayTensors {
    tokens: Vec<Vec<usize>>,
    actions: Vec<Vec<Action>>,
    source_task: usize,
}

fn replay_tensors(memory: &Memory, vocab: &WordVocab) -> Option<ReplayTensors> {
    if memory.is_empty() {
        return None;
    }
    Some(ReplayTensors {
        tokens: memory.entries.iter().map(|e| vocab.ids(&e.utterance)).collect(),
        actions: memory.entries.iter().map(|e| e.actions.clone()).collect(),
        source_task: memory.entries[0].source_task,
    })
}

/// Second training stage: full-model updates on the current task, with
/// optional replay minibatches from stored memories and an optional
/// quadratic consolidation penalty on every step.
#[allow(clippy::too_many_arguments)]
pub fn slow_stage(
    parser: &mut Parser,
    data: &TaskTensors,
    bounds: &[BoundGrammar],
    task: usize,
    state: &ContinualState,
    schedule: &TrainSchedule,
    current_mask: &TrainMask,
    replay_mask: &TrainMask,
    use_replay: bool,
    use_ewc: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    let consolidation = if use_ewc {
        match (&state.anchor, &state.fisher) {
            (Some(a), Some(f)) => Some((a, f)),
            _ => None,
        }
    } else {
        None
    };
    let replays: Vec<ReplayTensors> = if use_replay {
        state.memories.iter().filter_map(|m| replay_tensors(m, &parser.vocab)).collect()
    } else {
        Vec::new()
    };

    let mut logs = Vec::with_capacity(schedule.epochs_slow);
    for _ in 0..schedule.epochs_slow {
        let mut current_sum = 0.0;
        for batch_idx in shuffled_batches(data.len(), schedule.batch_size, rng) {
            let batch: Vec<BatchExample> = batch_idx
                .iter()
                .map(|&i| BatchExample {
                    tokens: &data.tokens[i],
                    actions: &data.actions[i],
                    bound: &bounds[task],
                    task,
                })
                .collect();
            let (loss, mut grads) = parser.gradient(&batch, current_mask)?;
            if let Some((anchor, fisher)) = consolidation {
                add_ewc_grads(&mut grads, parser, anchor, fisher, schedule.ewc_lambda, current_mask);
            }
            current_sum += loss * batch.len() as f64;
            adam_step(&mut parser.params, &grads, &mut parser.opt, schedule.lr);
        }
        let current_mean = current_sum / data.len().max(1) as f64;

        let mut replay_means = Vec::with_capacity(replays.len());
        for replay in &replays {
            let mut sum = 0.0;
            let mut count = 0usize;
            for _ in 0..schedule.replay_batches_per_epoch {
                let mut idx: Vec<usize> = (0..replay.tokens.len()).collect();
                idx.shuffle(rng);
                idx.truncate(schedule.batch_size);
                let batch: Vec<BatchExample> = idx
                    .iter()
                    .map(|&i| BatchExample {
                        tokens: &replay.tokens[i],
                        actions: &replay.actions[i],
                        bound: &bounds[replay.source_task],
                        task: replay.source_task,
                    })
                    .collect();
                let (loss, mut grads) = parser.gradient(&batch, replay_mask)?;
                if let Some((anchor, fisher)) = consolidation {
                    add_ewc_grads(
                        &mut grads,
                        parser,
                        anchor,
                        fisher,
                        schedule.ewc_lambda,
                        replay_mask,
                    );
                }
                sum += loss * batch.len() as f64;
                count += batch.len();
                adam_step(&mut parser.params, &grads, &mut parser.opt, schedule.lr);
            }
            replay_means.push(sum / count.max(1) as f64);
        }

        let penalty = match consolidation {
            Some((anchor, fisher)) => ewc_penalty(parser, anchor, fisher, schedule.ewc_lambda),
            None => 0.0,
        };
        let total = current_mean + replay_means.iter().sum::<f64>() + penalty;
        logs.push(EpochLog { current_mean, replay_means, penalty, total });
    }
    Ok(logs)
}

/// Diagonal curvature estimate: the mean over all stored memory instances
/// of the squared per-instance loss gradient, one entry per parameter.
pub fn compute_fisher(parser: &Parser, memories: &[Memory], bounds: &[BoundGrammar]) -> Result<Vec<Vec<f64>>> {
    let mut fisher: Vec<Vec<f64>> =
        parser.params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mask = TrainMask::all(&parser.params);
    let mut count = 0usize;
    for memory in memories {
        for entry in &memory.entries {
            let tokens = parser.vocab.ids(&entry.utterance);
            let ex = BatchExample {
                tokens: &tokens,
                actions: &entry.actions,
                bound: &bounds[entry.source_task],
                task: entry.source_task,
            };
            let (_, grads) = parser.gradient(&[ex], &mask)?;
            for (t, slot) in fisher.iter_mut().enumerate() {
                for (j, f) in slot.iter_mut().enumerate() {
                    let g = grads.slot(ParamId(t))[j];
                    *f += g * g;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMemory);
    }
    for slot in &mut fisher {
        for f in slot.iter_mut() {
            *f /= count as f64;
        }
    }
    Ok(fisher)
}

/// Fills one task's replay memory with the configured sampler.
#[allow(clippy::too_many_arguments)]
pub fn populate_memory(
    parser: &Parser,
    task: &TaskData,
    data: &TaskTensors,
    task_index: usize,
    sampler: SamplerKind,
    capacity: usize,
    dlfs_max_rounds: usize,
    subset_threshold: usize,
    seed: u64,
) -> Result<Memory> {
    let views: Vec<SampleView> = task
        .train
        .iter()
        .zip(&data.actions)
        .map(|(ex, actions)| SampleView { utterance: &ex.utterance, lf: &ex.lf, actions })
        .collect();
    // A task smaller than the requested capacity contributes all of its
    // training instances rather than failing the run.
    let capacity = capacity.min(views.len());
    match sampler {
        SamplerKind::Random => Ok(sample_random(&views, task_index, capacity, seed)),
        SamplerKind::Fss => {
            let mut features = Vec::with_capacity(views.len());
            for tokens in &data.tokens {
                let states = parser.encode_values(tokens)?;
                let d = states[0].len();
                let mut mean = vec![0.0; d];
                for h in &states {
                    for (m, v) in mean.iter_mut().zip(h) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= states.len() as f64;
                }
                features.push(mean);
            }
            sample_fss(&views, &features, task_index, capacity, seed)
        }
        SamplerKind::Lfs => sample_lfs(&views, task_index, capacity, seed),
        SamplerKind::Dlfs | SamplerKind::Balance => {
            let hist = ActionHistogram::from_sequences(
                data.actions.iter().map(|a| a.as_slice()),
                None,
            );
            let represented = hist.counts.iter().filter(|(_, &c)| c > 0).count();
            let support: BTreeSet<ActionId> = if represented > subset_threshold {
                sample_action_subset(&hist, subset_threshold, seed)
            } else {
                hist.counts
                    .iter()
                    .filter(|(_, &c)| c > 0)
                    .map(|(&a, _)| a)
                    .collect()
            };
            match sampler {
                SamplerKind::Dlfs => {
                    sample_dlfs(&views, &support, task_index, capacity, dlfs_max_rounds, seed)
                }
                _ => Ok(sample_balance(&views, &support, task_index, capacity, seed)),
            }
        }
    }
}

/// Stream-level knobs that are not part of the per-epoch schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamOptions {
    pub parser: ParserConfig,
    pub schedule: TrainSchedule,
    pub memory_capacity: usize,
    pub dlfs_max_rounds: usize,
    pub beam_width: usize,
    pub action_subset_threshold: usize,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            parser: ParserConfig::default(),
            schedule: TrainSchedule::default(),
            memory_capacity: 10,
            dlfs_max_rounds: DEFAULT_DLFS_ROUNDS,
            beam_width: 1,
            action_subset_threshold: ACTION_SUBSET_THRESHOLD,
        }
    }
}

impl StreamOptions {
    pub fn validate(&self) -> Result<()> {
        self.parser.validate()?;
        self.schedule.validate()?;
        if self.memory_capacity == 0 {
            return Err(Error::Config { msg: "memory capacity must be positive".to_string() });
        }
        if self.beam_width == 0 {
            return Err(Error::Config { msg: "beam width must be positive".to_string() });
        }
        Ok(())
    }
}

/// Per-task summary line of a run.
#[derive(Debug, Clone)]
pub struct TaskRow {
    pub task_index: usize,
    /// Final fast-stage epoch's mean loss; absent for single-stage methods
    /// and when the task brings no new actions.
    pub loss_fast: Option<f64>,
    /// Final slow-stage epoch's total loss (data + replay + penalty).
    pub loss_slow: f64,
    pub wall_ms: u128,
}

/// Everything a finished run exposes for logging and assertions.
pub struct RunOutcome {
    pub eval: EvalResult,
    pub task_rows: Vec<TaskRow>,
    /// Mean gold-prefix action probabilities on the first task's training
    /// set, one map per post-task checkpoint.
    pub trace_means: Vec<BTreeMap<ActionId, f64>>,
    pub parser: Parser,
    pub registry: ActionRegistry,
    pub state: ContinualState,
}

fn derive_sampler_seed(seed: u64, task: usize) -> u64 {
    seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x5a17)
}

/// Trains through the task sequence with the given method and returns the
/// full evaluation record. Deterministic in all arguments.
pub fn run_stream(
    tasks: &[TaskData],
    method: Method,
    sampler: SamplerKind,
    options: &StreamOptions,
    seed: u64,
) -> Result<RunOutcome> {
    assert!(method != Method::Oracle, "joint training has its own entry point");
    options.validate()?;
    let stream = prepare_stream(tasks)?;
    let mut config = options.parser.clone();
    config.dar_enabled = method.two_stage();
    config.rng_seed = seed;
    let mut parser = Parser::new(
        config,
        stream.vocab.clone(),
        &stream.registry,
        &stream.partitions,
        tasks.len(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);

    let tensors: Vec<TaskTensors> = tasks
        .iter()
        .zip(&stream.bounds)
        .map(|(t, b)| TaskTensors::prepare(t, b, &stream.vocab))
        .collect::<Result<_>>()?;

    let mut state = ContinualState::default();
    let mut eval = EvalResult::default();
    let mut task_rows = Vec::with_capacity(tasks.len());
    let mut trace_means = Vec::with_capacity(tasks.len());

    for k in 0..tasks.len() {
        let start = Instant::now();
        let bound = &stream.bounds[k];

        let loss_fast = if method.two_stage() {
            let unseen = unseen_actions(bound, &state);
            fast_stage(
                &mut parser,
                &tensors[k],
                bound,
                k,
                &unseen,
                &options.schedule,
                &mut rng,
            )?
        } else {
            None
        };

        let (current_mask, replay_mask) = if method.two_stage() {
            (
                TrainMask::allowing(&parser.params, |p| {
                    p == Partition::Global || p == Partition::Task(k)
                }),
                TrainMask::allowing(&parser.params, |p| p == Partition::Global),
            )
        } else {
            (TrainMask::all(&parser.params), TrainMask::all(&parser.params))
        };

        let logs = slow_stage(
            &mut parser,
            &tensors[k],
            &stream.bounds,
            k,
            &state,
            &options.schedule,
            &current_mask,
            &replay_mask,
            method.uses_replay(),
            method.uses_ewc(),
            &mut rng,
        )?;
        let loss_slow = logs.last().map(|l| l.total).unwrap_or(0.0);

        if method.uses_memory() {
            let memory = populate_memory(
                &parser,
                &tasks[k],
                &tensors[k],
                k,
                sampler,
                options.memory_capacity,
                options.dlfs_max_rounds,
                options.action_subset_threshold,
                derive_sampler_seed(seed, k),
            )?;
            state.memories.push(memory);
        }
        if method.uses_ewc() {
            state.fisher = Some(compute_fisher(&parser, &state.memories, &stream.bounds)?);
            state.anchor = Some(parser.params.snapshot());
        }
        state.seen_actions.extend(bound.inventory.iter().copied());

        let mut row = Vec::with_capacity(k + 1);
        for i in 0..=k {
            row.push(evaluate_split(
                &parser,
                &tasks[i].test,
                &stream.bounds[i],
                i,
                options.beam_width,
            )?);
        }
        eval.push_row(row);
        trace_means.push(mean_gold_action_probs(
            &parser,
            &tasks[0].train,
            &stream.bounds[0],
            0,
        )?);

        task_rows.push(TaskRow {
            task_index: k,
            loss_fast,
            loss_slow,
            wall_ms: start.elapsed().as_millis(),
        });
    }

    Ok(RunOutcome {
        eval,
        task_rows,
        trace_means,
        parser,
        registry: stream.registry,
        state,
    })
}

/// Joint training on the concatenation of every task's training set; the
/// evaluation is a single row covering all tasks.
pub fn oracle_train(tasks: &[TaskData], options: &StreamOptions, seed: u64) -> Result<RunOutcome> {
    options.validate()?;
    let stream = prepare_stream(tasks)?;
    let mut config = options.parser.clone();
    config.dar_enabled = false;
    config.rng_seed = seed;
    let mut parser = Parser::new(
        config,
        stream.vocab.clone(),
        &stream.registry,
        &stream.partitions,
        tasks.len(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);

    let start = Instant::now();
    let tensors: Vec<TaskTensors> = tasks
        .iter()
        .zip(&stream.bounds)
        .map(|(t, b)| TaskTensors::prepare(t, b, &stream.vocab))
        .collect::<Result<_>>()?;
    // Flatten to (task, example) pairs so a batch can mix tasks.
    let flat: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();

    let mask = TrainMask::all(&parser.params);
    let mut loss_slow = 0.0;
    for _ in 0..options.schedule.epochs_slow {
        let mut sum = 0.0;
        for batch_idx in shuffled_batches(flat.len(), options.schedule.batch_size, &mut rng) {
            let batch: Vec<BatchExample> = batch_idx
                .iter()
                .map(|&fi| {
                    let (k, i) = flat[fi];
                    BatchExample {
                        tokens: &tensors[k].tokens[i],
                        actions: &tensors[k].actions[i],
                        bound: &stream.bounds[k],
                        task: k,
                    }
                })
                .collect();
            let (loss, grads) = parser.gradient(&batch, &mask)?;
            sum += loss * batch.len() as f64;
            adam_step(&mut parser.params, &grads, &mut parser.opt, options.schedule.lr);
        }
        loss_slow = sum / flat.len().max(1) as f64;
    }

    let mut row = Vec::with_capacity(tasks.len());
    for i in 0..tasks.len() {
        row.push(evaluate_split(
            &parser,
            &tasks[i].test,
            &stream.bounds[i],
            i,
            options.beam_width,
        )?);
    }
    let eval = EvalResult { rows: vec![row] };
    let trace_means = vec![mean_gold_action_probs(
        &parser,
        &tasks[0].train,
        &stream.bounds[0],
        0,
    )?];

    Ok(RunOutcome {
        eval,
        task_rows: vec![TaskRow {
            task_index: tasks.len() - 1,
            loss_fast: None,
            loss_slow,
            wall_ms: start.elapsed().as_millis(),
        }],
        trace_means,
        parser,
        registry: stream.registry,
        state: ContinualState::default(),
    })
}
