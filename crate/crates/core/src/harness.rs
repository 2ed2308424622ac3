//! Experiment harness: JSON experiment configs, a seeded run matrix with a
//! resumable CSV log, report generation (summary tables, curve data, and
//! self-contained SVG charts), corpus generation, and standalone memory
//! sampling.
//!
//! Output layout under the chosen directory:
//!
//! * `runs.csv` — one row per (run, trained-task, evaluated-task) triple;
//!   aborted runs are marked in the `status` column. Reruns of the same
//!   config skip cells that already have rows, so the command is
//!   idempotent and resumable.
//! * `traces.csv` — per-action mean gold-prefix probabilities on the first
//!   task's training set, one row per (run, action, checkpoint).
//! * `checkpoints/` — final model parameters per run (opt-in).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_synthetic, load_corpus, overlap_summary, save_corpus, SynthSpec, TaskData,
};
use crate::error::{Error, Result};
use crate::eval::build_traces;
use crate::nn::{Parser, ParserConfig};
use crate::sampling::{
    memory_entropy, save_memory, ActionHistogram, ACTION_SUBSET_THRESHOLD, DEFAULT_DLFS_ROUNDS,
};
use crate::trainer::{
    oracle_train, populate_memory, prepare_stream, run_stream, Method, SamplerKind,
    StreamOptions, TaskTensors, TrainSchedule,
};

/// Environment variable that overrides the output directory for every
/// command (CLI `--out` still wins over it).
pub const OUT_ENV: &str = "SEMPARSE_OUT";

pub const RUNS_CSV: &str = "runs.csv";
pub const TRACES_CSV: &str = "traces.csv";

const RUNS_HEADER: &str =
    "method,sampler,seed,order,task_index,eval_task,acc,acc_avg,acc_whole,loss_fast,loss_slow,wall_ms,status";
const TRACES_HEADER: &str =
    "method,sampler,seed,order,action_id,action_text,origin_task,class,k,mean_prob";

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Task-order dimension of the run matrix: either "generate `count`
/// distinct permutations deterministically" (the first is always the
/// identity) or an explicit list of permutations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Count { count: usize },
    Explicit { explicit: Vec<Vec<usize>> },
}

impl Default for OrderSpec {
    fn default() -> Self {
        OrderSpec::Count { count: 1 }
    }
}

fn default_samplers() -> Vec<String> {
    vec!["RANDOM".to_string()]
}

fn default_capacity() -> usize {
    10
}

fn default_beam() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_dlfs_rounds() -> usize {
    DEFAULT_DLFS_ROUNDS
}

fn default_subset_threshold() -> usize {
    ACTION_SUBSET_THRESHOLD
}

/// A complete experiment description, as read from a JSON file. Exactly one
/// of `corpus` / `synth` must be present. Methods and samplers are given by
/// their canonical names (`"TR_EWC"`, `"DLFS"`, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSONL corpus path (grammars expected as sibling `<task>.grammar`
    /// files unless `grammar_dir` is given).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub grammar_dir: Option<PathBuf>,
    /// Inline synthetic-stream spec; the tasks are generated in memory.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    pub methods: Vec<String>,
    #[serde(default = "default_samplers")]
    pub samplers: Vec<String>,
    #[serde(default = "default_capacity")]
    pub memory_capacity: usize,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub parser: ParserConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub orders: OrderSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_dlfs_rounds")]
    pub dlfs_max_rounds: usize,
    #[serde(default = "default_subset_threshold")]
    pub action_subset_threshold: usize,
    /// Save each run's final parameters under `checkpoints/`.
    #[serde(default)]
    pub checkpoints: bool,
}

/// Reads and parses an experiment config, returning it together with the
/// directory it lives in (relative paths inside the file resolve against
/// that directory).
pub fn load_experiment(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        msg: format!("cannot read experiment config '{}': {e}", path.display()),
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        msg: format!("invalid experiment config '{}': {e}", path.display()),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((config, dir))
}

/// Output-directory precedence: explicit CLI flag, then the environment
/// override, then the config value (resolved against the config's own
/// directory when relative).
pub fn effective_out_dir(
    cli: Option<&Path>,
    env: Option<&str>,
    config_out: &Path,
    config_dir: &Path,
) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(e) = env {
        if !e.is_empty() {
            return PathBuf::from(e);
        }
    }
    if config_out.is_absolute() {
        config_out.to_path_buf()
    } else {
        config_dir.join(config_out)
    }
}

/// The config with every choice made concrete: tasks materialized, names
/// parsed, permutations expanded.
pub struct ResolvedExperiment {
    pub tasks: Vec<TaskData>,
    pub methods: Vec<Method>,
    pub samplers: Vec<SamplerKind>,
    pub orders: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub options: StreamOptions,
    pub checkpoints: bool,
}

/// Expands an [`OrderSpec`] into explicit, pairwise-distinct permutations
/// of `0..num_tasks`. Generation is deterministic: order 0 is the identity
/// and later ones come from a fixed-seed shuffle sequence.
pub fn make_orders(spec: &OrderSpec, num_tasks: usize) -> Result<Vec<Vec<usize>>> {
    match spec {
        OrderSpec::Count { count } => {
            if *count == 0 {
                return Err(Error::Config { msg: "order count must be positive".into() });
            }
            let mut orders: Vec<Vec<usize>> = Vec::with_capacity(*count);
            let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
            let identity: Vec<usize> = (0..num_tasks).collect();
            seen.insert(identity.clone());
            orders.push(identity);
            let mut salt = 0u64;
            while orders.len() < *count {
                salt += 1;
                if salt > 10_000 {
                    return Err(Error::Config {
                        msg: format!(
                            "cannot produce {count} distinct orders of {num_tasks} tasks"
                        ),
                    });
                }
                let mut p: Vec<usize> = (0..num_tasks).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(0x0a5e_11ed ^ salt);
                p.shuffle(&mut rng);
                if seen.insert(p.clone()) {
                    orders.push(p);
                }
            }
            Ok(orders)
        }
        OrderSpec::Explicit { explicit } => {
            if explicit.is_empty() {
                return Err(Error::Config { msg: "need at least one task order".into() });
            }
            for p in explicit {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                if sorted != (0..num_tasks).collect::<Vec<_>>() {
                    return Err(Error::Config {
                        msg: format!(
                            "order {p:?} is not a permutation of 0..{num_tasks}"
                        ),
                    });
                }
            }
            Ok(explicit.clone())
        }
    }
}

/// Validates the config and materializes tasks; `config_dir` anchors
/// relative corpus paths.
pub fn resolve_experiment(
    config: &ExperimentConfig,
    config_dir: &Path,
) -> Result<ResolvedExperiment> {
    let tasks = match (&config.corpus, &config.synth) {
        (Some(_), Some(_)) => {
            return Err(Error::Config {
                msg: "give either a corpus path or a synth spec, not both".into(),
            })
        }
        (None, None) => {
            return Err(Error::Config { msg: "need a corpus path or a synth spec".into() })
        }
        (Some(corpus), None) => {
            let corpus = if corpus.is_absolute() {
                corpus.clone()
            } else {
                config_dir.join(corpus)
            };
            let grammar_dir = match &config.grammar_dir {
                Some(d) if d.is_absolute() => d.clone(),
                Some(d) => config_dir.join(d),
                None => corpus
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .to_path_buf(),
            };
            load_corpus(&corpus, &grammar_dir)?
        }
        (None, Some(spec)) => generate_synthetic(spec)?,
    };
    if config.methods.is_empty() {
        return Err(Error::Config { msg: "need at least one method".into() });
    }
    if config.samplers.is_empty() {
        return Err(Error::Config { msg: "need at least one sampler".into() });
    }
    if config.seeds.is_empty() {
        return Err(Error::Config { msg: "need at least one seed".into() });
    }
    let mut methods = Vec::new();
    for name in &config.methods {
        let m = Method::parse(name)?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let mut samplers = Vec::new();
    for name in &config.samplers {
        let s = SamplerKind::parse(name)?;
        if !samplers.contains(&s) {
            samplers.push(s);
        }
    }
    let orders = make_orders(&config.orders, tasks.len())?;
    let options = StreamOptions {
        parser: config.parser.clone(),
        schedule: config.schedule,
        memory_capacity: config.memory_capacity,
        dlfs_max_rounds: config.dlfs_max_rounds,
        beam_width: config.beam_width,
        action_subset_threshold: config.action_subset_threshold,
    };
    options.validate()?;
    Ok(ResolvedExperiment {
        tasks,
        methods,
        samplers,
        orders,
        seeds: config.seeds.clone(),
        options,
        checkpoints: config.checkpoints,
    })
}

// ---------------------------------------------------------------------------
// The run matrix
// ---------------------------------------------------------------------------

/// One run of the matrix. `sampler` is `None` for methods that never store
/// memories (plain sequential training and the joint upper bound), which
/// collapses the sampler dimension for them.
#[derive(Debug, Clone)]
pub struct Cell {
    pub method: Method,
    pub sampler: Option<SamplerKind>,
    pub order_idx: usize,
    pub seed: u64,
}

impl Cell {
    pub fn sampler_name(&self) -> &'static str {
        self.sampler.map(SamplerKind::name).unwrap_or("-")
    }
}

fn order_string(order: &[usize]) -> String {
    order.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-")
}

fn cell_key(method: &str, sampler: &str, seed: &str, order: &str) -> String {
    format!("{method}|{sampler}|{seed}|{order}")
}

/// Enumerates the full cross product in canonical order (method, sampler,
/// order, seed); this is also the order rows appear in the CSV.
pub fn enumerate_cells(exp: &ResolvedExperiment) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in &exp.methods {
        let samplers: Vec<Option<SamplerKind>> = if method.uses_memory() {
            exp.samplers.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for sampler in samplers {
            for order_idx in 0..exp.orders.len() {
                for &seed in &exp.seeds {
                    cells.push(Cell { method, sampler, order_idx, seed });
                }
            }
        }
    }
    cells
}

fn sanitize_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

/// Completed-cell keys already present in an existing run log.
fn read_completed_cells(path: &Path) -> Result<BTreeSet<String>> {
    let mut done = BTreeSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let text = fs::read_to_string(path)?;
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 4 {
            done.insert(cell_key(fields[0], fields[1], fields[2], fields[3]));
        }
    }
    Ok(done)
}

struct CellOutput {
    run_rows: Vec<String>,
    trace_rows: Vec<String>,
    aborted: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_cell(exp: &ResolvedExperiment, cell: &Cell, out_dir: &Path) -> CellOutput {
    let order = &exp.orders[cell.order_idx];
    let ordered: Vec<TaskData> = order.iter().map(|&i| exp.tasks[i].clone()).collect();
    let order_str = order_string(order);
    let prefix = [
        cell.method.name().to_string(),
        cell.sampler_name().to_string(),
        cell.seed.to_string(),
        order_str,
    ];
    let start = Instant::now();
    let result = if cell.method == Method::Oracle {
        oracle_train(&ordered, &exp.options, cell.seed)
    } else {
        run_stream(
            &ordered,
            cell.method,
            cell.sampler.unwrap_or(SamplerKind::Random),
            &exp.options,
            cell.seed,
        )
    };
    let outcome = match result.and_then(|outcome| {
        if exp.checkpoints {
            let dir = out_dir.join("checkpoints");
            fs::create_dir_all(&dir)?;
            let name = format!(
                "{}_{}_{}_{}.json",
                prefix[0], prefix[1], prefix[2], prefix[3]
            );
            outcome.parser.save_checkpoint(&dir.join(name))?;
        }
        Ok(outcome)
    }) {
        Ok(outcome) => outcome,
        Err(e) => {
            let mut cols: Vec<String> = prefix.to_vec();
            cols.extend(std::iter::repeat_n(String::new(), 7));
            cols.push(start.elapsed().as_millis().to_string());
            cols.push(format!("aborted: {}", sanitize_field(&e.to_string())));
            return CellOutput { run_rows: vec![cols.join(",")], trace_rows: Vec::new(), aborted: true };
        }
    };

    let mut run_rows = Vec::new();
    for (row_idx, task_row) in outcome.task_rows.iter().enumerate() {
        let evals = &outcome.eval.rows[row_idx];
        for (i, acc_cell) in evals.iter().enumerate() {
            let mut cols: Vec<String> = prefix.to_vec();
            cols.push(task_row.task_index.to_string());
            cols.push(i.to_string());
            cols.push(acc_cell.acc().to_string());
            cols.push(outcome.eval.acc_avg(row_idx).to_string());
            cols.push(outcome.eval.acc_whole(row_idx).to_string());
            cols.push(fmt_opt(task_row.loss_fast));
            cols.push(task_row.loss_slow.to_string());
            cols.push(task_row.wall_ms.to_string());
            cols.push("ok".to_string());
            run_rows.push(cols.join(","));
        }
    }

    let mut trace_rows = Vec::new();
    if let Ok(stream) = prepare_stream(&ordered) {
        let traces = build_traces(
            &outcome.trace_means,
            |a| outcome.registry.key(a).to_string(),
            &stream.bounds,
        );
        for t in &traces {
            for (snap_idx, &p) in t.mean_probs.iter().enumerate() {
                let mut cols: Vec<String> = prefix.to_vec();
                cols.push(t.action_id.to_string());
                cols.push(sanitize_field(&t.action_text));
                cols.push(t.origin_task.to_string());
                cols.push(if t.cross_task { "cross_task" } else { "task_specific" }.to_string());
                cols.push(outcome.task_rows[snap_idx].task_index.to_string());
                cols.push(p.to_string());
                trace_rows.push(cols.join(","));
            }
        }
    }
    CellOutput { run_rows, trace_rows, aborted: false }
}

/// What `cmd_run` did, for logging and tests.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub runs_csv: PathBuf,
    pub traces_csv: PathBuf,
    pub cells_total: usize,
    pub cells_executed: usize,
    pub cells_skipped: usize,
    pub cells_aborted: usize,
}

fn open_append_with_header(path: &Path, header: &str) -> Result<fs::File> {
    let new = !path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(file, "{header}")?;
    }
    Ok(file)
}

/// Executes every not-yet-logged cell of the matrix across `jobs` worker
/// threads, appending rows in the canonical cell order regardless of which
/// worker finishes first, so rerunning a config reproduces the CSV exactly
/// (wall-time columns aside).
pub fn run_experiment(exp: &ResolvedExperiment, out_dir: &Path, jobs: usize) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let runs_path = out_dir.join(RUNS_CSV);
    let traces_path = out_dir.join(TRACES_CSV);
    let completed = read_completed_cells(&runs_path)?;
    let cells = enumerate_cells(exp);
    let todo: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            !completed.contains(&cell_key(
                c.method.name(),
                c.sampler_name(),
                &c.seed.to_string(),
                &order_string(&exp.orders[c.order_idx]),
            ))
        })
        .map(|(i, _)| i)
        .collect();

    let mut summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        runs_csv: runs_path.clone(),
        traces_csv: traces_path.clone(),
        cells_total: cells.len(),
        cells_executed: todo.len(),
        cells_skipped: cells.len() - todo.len(),
        cells_aborted: 0,
    };
    if todo.is_empty() {
        return Ok(summary);
    }

    let mut runs_file = open_append_with_header(&runs_path, RUNS_HEADER)?;
    let mut traces_file = open_append_with_header(&traces_path, TRACES_HEADER)?;

    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(todo.len());
    let (tx, rx) = mpsc::channel::<(usize, CellOutput)>();
    let mut io_result: Result<()> = Ok(());
    std::thread::scope(|scope| {
        let exp_ref = &*exp;
        let cells_ref = &cells;
        let todo_ref = &todo;
        let next_ref = &next;
        for _ in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || loop {
                let i = next_ref.fetch_add(1, Ordering::Relaxed);
                if i >= todo_ref.len() {
                    break;
                }
                let output = run_cell(exp_ref, &cells_ref[todo_ref[i]], out_dir);
                if tx.send((i, output)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Re-serialize results into canonical order before writing.
        let mut pending: BTreeMap<usize, CellOutput> = BTreeMap::new();
        let mut next_write = 0usize;
        for (i, output) in rx {
            pending.insert(i, output);
            while let Some(out) = pending.remove(&next_write) {
                summary.cells_aborted += out.aborted as usize;
                let write = (|| -> Result<()> {
                    for row in &out.run_rows {
                        writeln!(runs_file, "{row}")?;
                    }
                    for row in &out.trace_rows {
                        writeln!(traces_file, "{row}")?;
                    }
                    Ok(())
                })();
                if let Err(e) = write {
                    io_result = Err(e);
                    return;
                }
                next_write += 1;
            }
        }
    });
    io_result?;
    Ok(summary)
}

/// Loads a config, resolves the output directory (CLI flag, then the
/// `SEMPARSE_OUT` environment variable, then the config), and runs the
/// matrix.
pub fn cmd_run(config_path: &Path, out_override: Option<&Path>, jobs: usize) -> Result<RunSummary> {
    let (config, config_dir) = load_experiment(config_path)?;
    let env = std::env::var(OUT_ENV).ok();
    let out_dir = effective_out_dir(out_override, env.as_deref(), &config.out_dir, &config_dir);
    let exp = resolve_experiment(&config, &config_dir)?;
    run_experiment(&exp, &out_dir, jobs)
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// What `cmd_generate` wrote, for logging and tests.
pub struct GenerateSummary {
    pub out_dir: PathBuf,
    pub tasks: usize,
    pub examples: usize,
    pub total_actions: usize,
    pub cross_task_actions: usize,
    pub cross_task_applies: usize,
    pub per_task_actions: Vec<usize>,
}

/// Generates a synthetic task stream from a JSON spec file and writes the
/// grammars plus `corpus.jsonl` into `out_dir`. Byte-identical for a given
/// spec.
pub fn cmd_generate(spec_path: &Path, out_dir: &Path) -> Result<GenerateSummary> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Config {
        msg: format!("cannot read synth spec '{}': {e}", spec_path.display()),
    })?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config {
        msg: format!("invalid synth spec '{}': {e}", spec_path.display()),
    })?;
    spec.validate()?;
    let tasks = generate_synthetic(&spec)?;
    save_corpus(&tasks, out_dir)?;
    let overlap = overlap_summary(&tasks);
    Ok(GenerateSummary {
        out_dir: out_dir.to_path_buf(),
        tasks: tasks.len(),
        examples: tasks.iter().map(|t| t.train.len() + t.valid.len() + t.test.len()).sum(),
        total_actions: overlap.total_actions,
        cross_task_actions: overlap.cross_task_actions,
        cross_task_applies: overlap.cross_task_applies,
        per_task_actions: overlap.per_task_actions,
    })
}

// ---------------------------------------------------------------------------
// Standalone sampling
// ---------------------------------------------------------------------------

/// What `cmd_sample` selected, for logging and tests.
pub struct SampleSummary {
    pub task: String,
    pub task_index: usize,
    pub sampler: SamplerKind,
    pub requested: usize,
    pub selected: usize,
    /// The request exceeded the task's training set and was clamped.
    pub clamped: bool,
    /// Memory entropy over the task's represented actions.
    pub entropy: f64,
    /// Named structural checks on the selection (all should be true).
    pub flags: Vec<(String, bool)>,
    pub memory_path: PathBuf,
}

/// Runs one sampler standalone over a stored corpus task and writes the
/// selected memory as JSONL.
pub fn cmd_sample(
    corpus: &Path,
    grammar_dir: Option<&Path>,
    task_name: &str,
    sampler: SamplerKind,
    m: usize,
    seed: u64,
    out_path: &Path,
) -> Result<SampleSummary> {
    if m == 0 {
        return Err(Error::Config { msg: "memory size must be positive".into() });
    }
    let gdir = match grammar_dir {
        Some(d) => d.to_path_buf(),
        None => corpus.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    };
    let tasks = load_corpus(corpus, &gdir)?;
    let task_index = tasks
        .iter()
        .position(|t| t.name == task_name)
        .ok_or_else(|| Error::Config {
            msg: format!(
                "unknown task '{task_name}' (available: {})",
                tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
            ),
        })?;
    let stream = prepare_stream(&tasks)?;
    let task = &tasks[task_index];
    let n = task.train.len();
    if n == 0 {
        return Err(Error::EmptyMemory);
    }
    // Feature-space sampling needs encoder states; a freshly initialized,
    // seed-determined encoder provides them for standalone runs.
    let config = ParserConfig { rng_seed: seed, dar_enabled: false, ..ParserConfig::default() };
    let parser = Parser::new(
        config,
        stream.vocab.clone(),
        &stream.registry,
        &stream.partitions,
        tasks.len(),
    )?;
    let tensors = TaskTensors::prepare(task, &stream.bounds[task_index], &stream.vocab)?;
    let memory = populate_memory(
        &parser,
        task,
        &tensors,
        task_index,
        sampler,
        m,
        DEFAULT_DLFS_ROUNDS,
        ACTION_SUBSET_THRESHOLD,
        seed,
    )?;
    let hist =
        ActionHistogram::from_sequences(tensors.actions.iter().map(|a| a.as_slice()), None);
    let support: BTreeSet<_> =
        hist.counts.iter().filter(|(_, &c)| c > 0).map(|(&a, _)| a).collect();
    let entropy = memory_entropy(&memory, &support);

    let mut flags: Vec<(String, bool)> = vec![
        ("requested_size_met".to_string(), memory.len() == m),
        (
            "entries_from_requested_task".to_string(),
            memory.entries.iter().all(|e| e.source_task == task_index),
        ),
    ];
    if matches!(sampler, SamplerKind::Lfs | SamplerKind::Dlfs) {
        let clusters: BTreeSet<_> = memory.entries.iter().map(|e| e.cluster_id).collect();
        flags.push((
            "one_entry_per_cluster".to_string(),
            clusters.len() == memory.len()
                && memory.entries.iter().all(|e| e.cluster_id.is_some()),
        ));
    }
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    save_memory(&memory, out_path)?;
    Ok(SampleSummary {
        task: task.name.clone(),
        task_index,
        sampler,
        requested: m,
        selected: memory.len(),
        clamped: m > n,
        entropy,
        flags,
        memory_path: out_path.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// One parsed `runs.csv` data row.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub method: String,
    pub sampler: String,
    pub seed: String,
    pub order: String,
    pub task_index: usize,
    pub eval_task: usize,
    pub acc: f64,
    pub acc_avg: f64,
    pub acc_whole: f64,
    pub ok: bool,
}

/// Parses a run log. Aborted rows come back with `ok == false` and zeroed
/// metrics; malformed lines are errors.
pub fn read_run_rows(path: &Path) -> Result<Vec<RunRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = |msg: &str| Error::MalformedRecord { line: idx + 1, msg: msg.to_string() };
        if f.len() != 13 {
            return Err(err(&format!("expected 13 fields, found {}", f.len())));
        }
        let ok = f[12] == "ok";
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(&format!("bad {what} '{s}'")))
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| err(&format!("bad {what} '{s}'")))
        };
        rows.push(RunRow {
            method: f[0].to_string(),
            sampler: f[1].to_string(),
            seed: f[2].to_string(),
            order: f[3].to_string(),
            task_index: if ok { parse_usize(f[4], "task_index")? } else { 0 },
            eval_task: if ok { parse_usize(f[5], "eval_task")? } else { 0 },
            acc: if ok { parse_f64(f[6], "acc")? } else { 0.0 },
            acc_avg: if ok { parse_f64(f[7], "acc_avg")? } else { 0.0 },
            acc_whole: if ok { parse_f64(f[8], "acc_whole")? } else { 0.0 },
            ok,
        });
    }
    Ok(rows)
}

/// Sample mean and standard deviation (n−1 denominator; 0 when n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final-checkpoint aggregate for one method/sampler combination.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub sampler: String,
    pub cells: usize,
    pub acc_avg_mean: f64,
    pub acc_avg_std: f64,
    pub acc_whole_mean: f64,
    pub acc_whole_std: f64,
}

/// What `cmd_report` produced, for logging and tests.
pub struct ReportSummary {
    pub data_rows: usize,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
    pub warning: Option<String>,
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Hand-rolled self-contained SVG line chart; y is fixed to [0, 1].
fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (x0, y0, x1, y1) = (70.0, 50.0, 520.0, 390.0);
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let sx = |x: f64| x0 + (x1 - x0) * x / x_max;
    let sy = |y: f64| y1 - (y1 - y0) * y.clamp(0.0, 1.0);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"28\" \
         font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        svg_escape(title)
    ));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            x0 - 8.0,
            y + 4.0
        ));
    }
    let ticks = x_max as usize;
    for t in 0..=ticks {
        let x = sx(t as f64);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y1}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#999\"/>\n\
             <text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>\n",
            y1 + 5.0,
            y1 + 20.0
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y1}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (x0 + x1) / 2.0,
        y1 + 38.0,
        svg_escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        svg_escape(y_label)
    ));
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if pts.len() > 1 {
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = y0 + 16.0 * si as f64;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            x1 + 14.0,
            ly - 9.0,
            x1 + 30.0,
            ly,
            svg_escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn combo_label(method: &str, sampler: &str) -> String {
    if sampler == "-" {
        method.to_string()
    } else {
        format!("{method}/{sampler}")
    }
}

/// Builds summary tables, per-task curve data, action-trace extremes, and
/// SVG charts from a run log. An empty log produces an empty report with a
/// warning rather than an error.
pub fn cmd_report(runlog: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let rows = read_run_rows(runlog)?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let ok_rows: Vec<&RunRow> = rows.iter().filter(|r| r.ok).collect();

    let summary_path = out_dir.join("summary.csv");
    const SUMMARY_HEADER: &str =
        "method,sampler,cells,final_acc_avg_mean,final_acc_avg_std,final_acc_whole_mean,final_acc_whole_std";
    if ok_rows.is_empty() {
        fs::write(&summary_path, format!("{SUMMARY_HEADER}\n"))?;
        files.push(summary_path);
        return Ok(ReportSummary {
            data_rows: rows.len(),
            summary: Vec::new(),
            files,
            warning: Some(format!(
                "no successful runs in '{}'; wrote an empty report",
                runlog.display()
            )),
        });
    }

    // Diagonal rows (eval_task == task_index) carry each checkpoint's
    // aggregate metrics exactly once.
    type Combo = (String, String);
    let mut per_cell_final: BTreeMap<Combo, BTreeMap<(String, String), (usize, f64, f64)>> =
        BTreeMap::new();
    let mut per_k: BTreeMap<Combo, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in &ok_rows {
        if r.eval_task != r.task_index {
            continue;
        }
        let combo = (r.method.clone(), r.sampler.clone());
        let cell = (r.seed.clone(), r.order.clone());
        let entry = per_cell_final
            .entry(combo.clone())
            .or_default()
            .entry(cell)
            .or_insert((0, 0.0, 0.0));
        if r.task_index >= entry.0 {
            *entry = (r.task_index, r.acc_avg, r.acc_whole);
        }
        per_k
            .entry(combo)
            .or_default()
            .entry(r.task_index)
            .or_default()
            .push((r.acc_avg, r.acc_whole));
    }

    let mut summary = Vec::new();
    let mut summary_csv = format!("{SUMMARY_HEADER}\n");
    for (combo, cells) in &per_cell_final {
        let avgs: Vec<f64> = cells.values().map(|v| v.1).collect();
        let wholes: Vec<f64> = cells.values().map(|v| v.2).collect();
        let (am, asd) = mean_std(&avgs);
        let (wm, wsd) = mean_std(&wholes);
        summary.push(SummaryRow {
            method: combo.0.clone(),
            sampler: combo.1.clone(),
            cells: cells.len(),
            acc_avg_mean: am,
            acc_avg_std: asd,
            acc_whole_mean: wm,
            acc_whole_std: wsd,
        });
        summary_csv.push_str(&format!(
            "{},{},{},{am},{asd},{wm},{wsd}\n",
            combo.0,
            combo.1,
            cells.len()
        ));
    }
    fs::write(&summary_path, summary_csv)?;
    files.push(summary_path);

    let curves_path = out_dir.join("curves.csv");
    let mut curves_csv = String::from(
        "method,sampler,task_index,cells,acc_avg_mean,acc_avg_std,acc_whole_mean,acc_whole_std\n",
    );
    let mut whole_series = Vec::new();
    let mut avg_series = Vec::new();
    for (combo, by_k) in &per_k {
        let mut wpts = Vec::new();
        let mut apts = Vec::new();
        for (&k, vals) in by_k {
            let avgs: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let wholes: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let (am, asd) = mean_std(&avgs);
            let (wm, wsd) = mean_std(&wholes);
            curves_csv.push_str(&format!(
                "{},{},{k},{},{am},{asd},{wm},{wsd}\n",
                combo.0,
                combo.1,
                vals.len()
            ));
            wpts.push((k as f64, wm));
            apts.push((k as f64, am));
        }
        let label = combo_label(&combo.0, &combo.1);
        whole_series.push(Series { label: label.clone(), points: wpts });
        avg_series.push(Series { label, points: apts });
    }
    fs::write(&curves_path, curves_csv)?;
    files.push(curves_path);

    let whole_svg_path = out_dir.join("acc_whole_curves.svg");
    fs::write(
        &whole_svg_path,
        svg_line_chart(
            "Whole-stream accuracy after each task",
            "trained tasks (stream position)",
            "ACC_whole",
            &whole_series,
        ),
    )?;
    files.push(whole_svg_path);
    let avg_svg_path = out_dir.join("acc_avg_curves.svg");
    fs::write(
        &avg_svg_path,
        svg_line_chart(
            "Task-averaged accuracy after each task",
            "trained tasks (stream position)",
            "ACC_avg",
            &avg_series,
        ),
    )?;
    files.push(avg_svg_path);

    // Trace extremes: which first-task actions lost / kept the most
    // probability between the first and the final checkpoint.
    let traces_path = runlog.parent().unwrap_or_else(|| Path::new(".")).join(TRACES_CSV);
    if traces_path.exists() {
        let text = fs::read_to_string(&traces_path)?;
        // (method, sampler, action) → per run first/last probabilities.
        let mut probs: BTreeMap<(String, String, u64), BTreeMap<(String, String), Vec<(usize, f64)>>> =
            BTreeMap::new();
        let mut meta: BTreeMap<u64, (String, String)> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::MalformedRecord {
                    line: idx + 1,
                    msg: format!("expected 10 fields, found {}", f.len()),
                });
            }
            let action_id: u64 = f[4].parse().map_err(|_| Error::MalformedRecord {
                line: idx + 1,
                msg: format!("bad action_id '{}'", f[4]),
            })?;
            let k: usize = f[8].parse().unwrap_or(0);
            let p: f64 = f[9].parse().unwrap_or(0.0);
            meta.insert(action_id, (f[5].to_string(), f[7].to_string()));
            probs
                .entry((f[0].to_string(), f[1].to_string(), action_id))
                .or_default()
                .entry((f[2].to_string(), f[3].to_string()))
                .or_default()
                .push((k, p));
        }
        let mut drops: BTreeMap<(String, String), Vec<(u64, f64, f64, f64)>> = BTreeMap::new();
        for ((method, sampler, action), runs) in &probs {
            let mut firsts = Vec::new();
            let mut lasts = Vec::new();
            for snaps in runs.values() {
                let mut snaps = snaps.clone();
                snaps.sort_by_key(|&(k, _)| k);
                if let (Some(first), Some(last)) = (snaps.first(), snaps.last()) {
                    firsts.push(first.1);
                    lasts.push(last.1);
                }
            }
            if firsts.is_empty() {
                continue;
            }
            let f = mean_std(&firsts).0;
            let l = mean_std(&lasts).0;
            drops
                .entry((method.clone(), sampler.clone()))
                .or_default()
                .push((*action, f, l, f - l));
        }
        let mut extremes_csv = String::from(
            "method,sampler,extreme,action_id,action_text,class,first_mean,last_mean,drop\n",
        );
        for ((method, sampler), mut actions) in drops {
            actions.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));
            let top: Vec<_> = actions.iter().take(3).cloned().collect();
            let bottom: Vec<_> = actions.iter().rev().take(3).cloned().collect();
            for (label, set) in [("max_drop", top), ("min_drop", bottom)] {
                for (action, f, l, d) in set {
                    let (text, class) = meta
                        .get(&action)
                        .cloned()
                        .unwrap_or_else(|| (String::new(), String::new()));
                    extremes_csv.push_str(&format!(
                        "{method},{sampler},{label},{action},{text},{class},{f},{l},{d}\n"
                    ));
                }
            }
        }
        let extremes_path = out_dir.join("trace_extremes.csv");
        fs::write(&extremes_path, extremes_csv)?;
        files.push(extremes_path);
    }

    Ok(ReportSummary { data_rows: rows.len(), summary, files, warning: None })
}
